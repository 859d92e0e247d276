use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported band layout: {0}")]
    UnsupportedBands(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("coordinate or window out of bounds: {0}")]
    OutOfBounds(String),

    #[error("geotransform is not invertible")]
    NonInvertible,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("could not sample {wanted} windows ({found} found after {attempts} attempts)")]
    InsufficientArea {
        wanted: usize,
        found: usize,
        attempts: usize,
    },

    #[error("model signature mismatch: {0}")]
    Signature(String),

    #[error("backbone execution failed: {0}")]
    Runtime(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("unsupported format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("bad magic in {0}")]
    Magic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
