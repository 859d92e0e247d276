//! Orthomosaic rasters, pixel/geo mapping, sliding windows and patch extraction.
//!
//! A raster is held fully in memory as interleaved 8-bit RGB plus a nodata mask.
//! Patches are only ever read through [`Orthomosaic::extract_patch`], so a
//! tiled backend can replace the in-memory buffer without touching callers.

mod geotiff;

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geotiff::write_geotiff;

/// Affine pixel → projected mapping in GDAL coefficient order.
///
/// `x = origin_x + col * pixel_width + row * row_rot`
/// `y = origin_y + col * col_rot + row * pixel_height`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_width: f64,
    pub row_rot: f64,
    pub origin_y: f64,
    pub col_rot: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    /// Pixel coordinates are used as projected coordinates.
    pub const IDENTITY: GeoTransform = GeoTransform {
        origin_x: 0.0,
        pixel_width: 1.0,
        row_rot: 0.0,
        origin_y: 0.0,
        col_rot: 0.0,
        pixel_height: 1.0,
    };

    pub fn from_gdal(c: [f64; 6]) -> Self {
        GeoTransform {
            origin_x: c[0],
            pixel_width: c[1],
            row_rot: c[2],
            origin_y: c[3],
            col_rot: c[4],
            pixel_height: c[5],
        }
    }

    pub fn to_gdal(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_width,
            self.row_rot,
            self.origin_y,
            self.col_rot,
            self.pixel_height,
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_width * self.pixel_height - self.row_rot * self.col_rot
    }

    /// Projected coordinates of a (fractional) pixel position.
    pub fn forward(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_width + row * self.row_rot,
            self.origin_y + col * self.col_rot + row * self.pixel_height,
        )
    }

    /// Fractional pixel position of a projected point.
    pub fn inverse(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::NonInvertible);
        }
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let col = (dx * self.pixel_height - dy * self.row_rot) / det;
        let row = (dy * self.pixel_width - dx * self.col_rot) / det;
        Ok((col, row))
    }
}

/// Floor that tolerates representation error of decimal pixel sizes
/// (`1.0 / 0.05` lands a hair below 20).
fn snap_floor(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v.floor()
    }
}

/// Square window addressed by its top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchWindow {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PatchWindow {
    pub fn new(x0: usize, y0: usize, size: usize) -> Self {
        PatchWindow { x0, y0, size }
    }

    /// Window of `size` whose top-left is `center - size/2`, if that is non-negative.
    pub fn centered(cx: usize, cy: usize, size: usize) -> Option<Self> {
        let half = size / 2;
        Some(PatchWindow::new(cx.checked_sub(half)?, cy.checked_sub(half)?, size))
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.size > 0 && self.x0 + self.size <= width && self.y0 + self.size <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.size && y >= self.y0 && y < self.y0 + self.size
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.size as f64 / 2.0,
            self.y0 as f64 + self.size as f64 / 2.0,
        )
    }
}

/// Pixel block copied out of an orthomosaic. Masked pixels are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Row-major interleaved RGB, `size * size * 3` bytes.
    pub pixels: Vec<u8>,
    pub nodata_fraction: f64,
    pub window: PatchWindow,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.window.size
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.window.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn from_rgb(window: PatchWindow, pixels: Vec<u8>, nodata_fraction: f64) -> Result<Self> {
        if pixels.len() != window.size * window.size * 3 {
            return Err(Error::invalid(format!(
                "patch buffer holds {} bytes, expected {}",
                pixels.len(),
                window.size * window.size * 3
            )));
        }
        Ok(Patch {
            pixels,
            nodata_fraction,
            window,
        })
    }
}

/// In-memory RGB orthomosaic with its nodata mask.
#[derive(Debug, Clone)]
pub struct Orthomosaic {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
    mask: Vec<bool>,
    /// Summed-area table of the mask, `(width + 1) * (height + 1)`.
    mask_sat: Vec<u32>,
    pub geotransform: GeoTransform,
    pub crs_id: String,
}

impl Orthomosaic {
    pub fn new(
        width: usize,
        height: usize,
        rgb: Vec<u8>,
        mask: Vec<bool>,
        geotransform: GeoTransform,
        crs_id: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if rgb.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} bytes, expected {}",
                rgb.len(),
                width * height * 3
            )));
        }
        if mask.len() != width * height {
            return Err(Error::invalid("mask dimensions differ from raster dimensions"));
        }
        if geotransform.pixel_width == 0.0 || geotransform.pixel_height == 0.0 {
            return Err(Error::invalid("pixel size must be non-zero"));
        }
        let mask_sat = summed_area(width, height, &mask);
        Ok(Orthomosaic {
            width,
            height,
            rgb,
            mask,
            mask_sat,
            geotransform,
            crs_id: crs_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb_bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn is_nodata(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Masked pixels inside an in-bounds window, in O(1).
    pub fn masked_count(&self, w: &PatchWindow) -> u32 {
        self.masked_in_rect(w.x0, w.y0, w.x0 + w.size, w.y0 + w.size)
    }

    /// Masked pixels in the half-open rectangle `[x0, x1) × [y0, y1)`, clipped to the raster.
    pub fn masked_in_rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return 0;
        }
        let s = self.width + 1;
        let at = |x: usize, y: usize| self.mask_sat[y * s + x];
        at(x1, y1) + at(x0, y0) - at(x0, y1) - at(x1, y0)
    }

    pub fn nodata_fraction(&self, w: &PatchWindow) -> f64 {
        f64::from(self.masked_count(w)) / (w.size * w.size) as f64
    }

    /// Pixel containing a projected point.
    pub fn geo_to_pixel(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let (col, row) = self.geotransform.inverse(x, y)?;
        let (col, row) = (snap_floor(col), snap_floor(row));
        if !(col >= 0.0 && row >= 0.0 && col < self.width as f64 && row < self.height as f64) {
            return Err(Error::OutOfBounds(format!(
                "({x}, {y}) maps to pixel ({col}, {row}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok((col as usize, row as usize))
    }

    /// Projected coordinates of a pixel center.
    pub fn pixel_center_to_geo(&self, col: usize, row: usize) -> (f64, f64) {
        self.geotransform.forward(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn extract_patch(&self, window: &PatchWindow) -> Result<Patch> {
        if !window.fits(self.width, self.height) {
            return Err(Error::OutOfBounds(format!(
                "window {}+{} x {}+{} exceeds {}x{}",
                window.x0, window.size, window.y0, window.size, self.width, self.height
            )));
        }
        let n = window.size;
        let mut pixels = vec![0u8; n * n * 3];
        for dy in 0..n {
            let y = window.y0 + dy;
            let src = (y * self.width + window.x0) * 3;
            let dst = dy * n * 3;
            pixels[dst..dst + n * 3].copy_from_slice(&self.rgb[src..src + n * 3]);
            let mrow = &self.mask[y * self.width + window.x0..y * self.width + window.x0 + n];
            for (dx, _) in mrow.iter().enumerate().filter(|(_, m)| **m) {
                pixels[dst + dx * 3..dst + dx * 3 + 3].fill(0);
            }
        }
        Ok(Patch {
            pixels,
            nodata_fraction: self.nodata_fraction(window),
            window: *window,
        })
    }
}

fn summed_area(width: usize, height: usize, mask: &[bool]) -> Vec<u32> {
    let s = width + 1;
    let mut sat = vec![0u32; s * (height + 1)];
    for y in 0..height {
        let mut run = 0u32;
        for x in 0..width {
            run += u32::from(mask[y * width + x]);
            sat[(y + 1) * s + x + 1] = sat[y * s + x + 1] + run;
        }
    }
    sat
}

/// Every in-bounds window position at the given stride, row-major.
///
/// Windows that would overhang the right or bottom edge are skipped.
pub fn window_grid(width: usize, height: usize, patch: usize, stride: usize) -> Vec<PatchWindow> {
    if patch == 0 || stride == 0 || patch > width || patch > height {
        return Vec::new();
    }
    let xs: Vec<usize> = (0..=width - patch).step_by(stride).collect();
    (0..=height - patch)
        .step_by(stride)
        .flat_map(|y0| xs.iter().map(move |&x0| PatchWindow::new(x0, y0, patch)))
        .collect()
}

/// Load a GeoTIFF or PNG orthomosaic, sniffing the container from its magic bytes.
pub fn load_orthomosaic(path: impl AsRef<Path>) -> Result<Orthomosaic> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut magic = [0u8; 8];
    let n = BufReader::new(File::open(path)?).read(&mut magic)?;
    let magic = &magic[..n];
    if magic.starts_with(b"\x89PNG") {
        load_png(path)
    } else if magic.starts_with(b"II*\0") || magic.starts_with(b"MM\0*") {
        geotiff::read_geotiff(path)
    } else {
        Err(Error::CorruptContainer(format!(
            "{}: neither TIFF nor PNG",
            path.display()
        )))
    }
}

fn load_png(path: &Path) -> Result<Orthomosaic> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::CorruptContainer(format!("{}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (rgb, mask) = match img {
        image::DynamicImage::ImageRgb8(buf) => (buf.into_raw(), vec![false; width * height]),
        image::DynamicImage::ImageRgba8(buf) => split_alpha(&buf.into_raw()),
        other => {
            return Err(Error::UnsupportedBands(format!(
                "{}: {:?}, expected 8-bit RGB or RGBA",
                path.display(),
                other.color()
            )))
        }
    };
    log::warn!(
        "{}: PNG carries no georeferencing, assuming identity geotransform",
        path.display()
    );
    Orthomosaic::new(width, height, rgb, mask, GeoTransform::IDENTITY, "")
}

/// Interleaved RGBA → (RGB, mask where alpha = 0).
pub(crate) fn split_alpha(rgba: &[u8]) -> (Vec<u8>, Vec<bool>) {
    let mut rgb = Vec::with_capacity(rgba.len() / 4 * 3);
    let mut mask = Vec::with_capacity(rgba.len() / 4);
    for px in rgba.chunks_exact(4) {
        rgb.extend_from_slice(&px[..3]);
        mask.push(px[3] == 0);
    }
    (rgb, mask)
}

/// Write the raster as RGBA PNG, alpha 0 on nodata pixels.
pub fn write_png(ortho: &Orthomosaic, path: impl AsRef<Path>) -> Result<()> {
    let rgba = to_rgba(ortho);
    image::RgbaImage::from_raw(ortho.width as u32, ortho.height as u32, rgba)
        .expect("buffer sized from raster")
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub(crate) fn to_rgba(ortho: &Orthomosaic) -> Vec<u8> {
    let mut rgba = Vec::with_capacity(ortho.width * ortho.height * 4);
    for (px, &m) in ortho.rgb.chunks_exact(3).zip(&ortho.mask) {
        rgba.extend_from_slice(px);
        rgba.push(if m { 0 } else { 255 });
    }
    rgba
}
