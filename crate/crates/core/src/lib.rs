//! Palm canopy detection over large orthomosaic rasters.
//!
//! The pipeline has four stages:
//!
//! 1. [`raster`] loads an orthomosaic with its nodata mask and enumerates
//!    sliding-window positions.
//! 2. [`dataset`] turns labeled points into fixed-size patch sets, splits them
//!    and augments them.
//! 3. [`backbone`] embeds patches with a frozen ONNX CNN, and [`mlp`] trains a
//!    small batch-normalized classification head on the cached embeddings.
//! 4. [`scan`] runs the trained head over every window of the raster and
//!    averages overlapping votes into a per-pixel probability grid.
//!
//! [`metrics`] scores a trained head on held-out patches and [`synth`] builds
//! procedural test landscapes with known palm locations.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mlp;
pub mod raster;
pub mod scan;
pub mod synth;
mod util;

pub use error::{Error, Result};
