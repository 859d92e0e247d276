//! Sliding-window scanning of an orthomosaic into a per-pixel palm probability grid.
//!
//! Every window of the stride grid is scored once. Windows with too many
//! nodata pixels vote 0 without reaching the scorer. Each pixel's probability
//! is the mean of the votes of all windows covering it.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::MISSING_THRESHOLD;
use crate::error::{Error, Result};
use crate::mlp::MlpHead;
use crate::raster::{window_grid, Orthomosaic, Patch, PatchWindow};
use crate::util::read_u32;

/// Side of the windows proposed for coarse labeling.
pub const CANDIDATE_SIZE: usize = 100;

const GRID_MAGIC: &[u8; 4] = b"PGRD";
const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub missing_threshold: f64,
    pub batch_size: usize,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// When positive, windows with a nodata pixel within this many pixels of
    /// their border also vote 0.
    #[serde(default)]
    pub blank_margin: usize,
}

impl ScanConfig {
    pub fn new(patch_size: usize, stride: usize) -> Self {
        ScanConfig {
            patch_size,
            stride,
            missing_threshold: MISSING_THRESHOLD,
            batch_size: 64,
            workers: 0,
            blank_margin: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.batch_size == 0 {
            return Err(Error::invalid("patch size, stride and batch size must be positive"));
        }
        if !(self.missing_threshold > 0.0 && self.missing_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "missing threshold {} not in (0, 1]",
                self.missing_threshold
            )));
        }
        Ok(())
    }
}

/// Anything that turns a batch of patches into palm probabilities.
pub trait PatchScorer: Sync {
    fn score_batch(&self, patches: &[Patch]) -> Result<Vec<f64>>;
}

/// Scorer from a per-patch function; handy for tests and baselines.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&Patch) -> f64 + Sync> PatchScorer for FnScorer<F> {
    fn score_batch(&self, patches: &[Patch]) -> Result<Vec<f64>> {
        Ok(patches.iter().map(&self.0).collect())
    }
}

/// Wraps a scorer and counts how many patches reach it.
pub struct CountingScorer<S> {
    pub inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: PatchScorer> PatchScorer for CountingScorer<S> {
    fn score_batch(&self, patches: &[Patch]) -> Result<Vec<f64>> {
        self.calls.fetch_add(patches.len(), Ordering::SeqCst);
        self.inner.score_batch(patches)
    }
}

/// Frozen backbone followed by a trained head.
pub struct Classifier {
    pub backbone: Backbone,
    pub head: MlpHead<f32>,
}

impl Classifier {
    pub fn new(backbone: Backbone, head: MlpHead<f32>) -> Result<Self> {
        if backbone.out_dim() != head.dim() {
            return Err(Error::invalid(format!(
                "backbone emits D = {}, head expects {}",
                backbone.out_dim(),
                head.dim()
            )));
        }
        Ok(Classifier { backbone, head })
    }
}

impl PatchScorer for Classifier {
    fn score_batch(&self, patches: &[Patch]) -> Result<Vec<f64>> {
        let feats = self.backbone.embed_batch(patches)?;
        let flat: Vec<f32> = feats.into_iter().flat_map(|f| f.0).collect();
        self.head.predict_proba_batch(&flat)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanStats {
    pub windows: usize,
    pub scored: usize,
    pub skipped_masked: usize,
}

/// Per-pixel vote sums and counts over a stride grid of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub patch_size: usize,
    pub acc: Vec<f64>,
    pub count: Vec<u32>,
}

/// Window indices along one axis that cover `pos`, as `lo..=hi`.
fn covering(pos: usize, patch: usize, stride: usize, n: usize) -> Option<(usize, usize)> {
    let lo = if pos + 1 > patch { (pos + 1 - patch).div_ceil(stride) } else { 0 };
    let hi = (pos / stride).min(n.checked_sub(1)?);
    (lo <= hi).then_some((lo, hi))
}

impl ProbabilityGrid {
    /// Accumulate one probability per window of `window_grid(width, height,
    /// patch, stride)` (row-major).
    ///
    /// Sums run in a fixed order, so the result depends only on the inputs.
    pub fn from_window_probs(
        width: usize,
        height: usize,
        patch: usize,
        stride: usize,
        probs: &[f64],
    ) -> Result<Self> {
        if patch == 0 || stride == 0 || patch > width || patch > height {
            return Err(Error::invalid(format!(
                "raster {width}x{height} is smaller than the {patch}px patch"
            )));
        }
        let nx = (width - patch) / stride + 1;
        let ny = (height - patch) / stride + 1;
        if probs.len() != nx * ny {
            return Err(Error::invalid(format!("{} window values for a {nx}x{ny} grid", probs.len())));
        }
        let xr: Vec<_> = (0..width).map(|x| covering(x, patch, stride, nx)).collect();
        // Horizontal pass: per window row, sum of votes covering each column.
        let mut rows = vec![0.0f64; ny * width];
        for j in 0..ny {
            let p = &probs[j * nx..(j + 1) * nx];
            for (x, r) in xr.iter().enumerate() {
                if let Some((lo, hi)) = *r {
                    rows[j * width + x] = p[lo..=hi].iter().sum();
                }
            }
        }
        let mut acc = vec![0.0f64; width * height];
        let mut count = vec![0u32; width * height];
        for y in 0..height {
            let Some((lo, hi)) = covering(y, patch, stride, ny) else {
                continue;
            };
            let out = &mut acc[y * width..(y + 1) * width];
            for j in lo..=hi {
                for (o, v) in out.iter_mut().zip(&rows[j * width..(j + 1) * width]) {
                    *o += v;
                }
            }
            let cy = (hi - lo + 1) as u32;
            for (x, r) in xr.iter().enumerate() {
                if let Some((a, b)) = *r {
                    count[y * width + x] = cy * (b - a + 1) as u32;
                }
            }
        }
        Ok(ProbabilityGrid {
            width,
            height,
            stride,
            patch_size: patch,
            acc,
            count,
        })
    }

    /// Mean vote at a pixel, `None` where no window reaches.
    pub fn prob(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        (self.count[i] > 0).then(|| self.acc[i] / f64::from(self.count[i]))
    }

    pub fn probabilities(&self) -> Vec<Option<f64>> {
        self.acc
            .iter()
            .zip(&self.count)
            .map(|(&a, &c)| (c > 0).then(|| a / f64::from(c)))
            .collect()
    }

    pub fn covered_pixels(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// `grid.bin`: header, f32 probabilities (NaN for nodata), u32 counts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut buf = Vec::with_capacity(24 + n * 8);
        buf.extend_from_slice(GRID_MAGIC);
        for h in [GRID_VERSION, self.width as u32, self.height as u32, self.stride as u32, self.patch_size as u32] {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for p in self.probabilities() {
            buf.extend_from_slice(&p.map_or(f32::NAN, |v| v as f32).to_le_bytes());
        }
        for c in &self.count {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf
    }

    /// Parse `grid.bin`. Probabilities come back at 32-bit precision.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 24 || &buf[..4] != GRID_MAGIC {
            return Err(Error::Magic("grid file".into()));
        }
        let version = read_u32(buf, 4);
        if version != GRID_VERSION {
            return Err(Error::Version {
                found: version,
                expected: GRID_VERSION,
            });
        }
        let [width, height, stride, patch_size] =
            [8, 12, 16, 20].map(|at| read_u32(buf, at) as usize);
        let n = width * height;
        if buf.len() != 24 + n * 8 {
            return Err(Error::CorruptContainer(format!(
                "grid file is {} bytes, expected {}",
                buf.len(),
                24 + n * 8
            )));
        }
        let count: Vec<u32> = (0..n).map(|i| read_u32(buf, 24 + 4 * n + 4 * i)).collect();
        let acc = (0..n)
            .map(|i| {
                let p = f32::from_le_bytes(buf[24 + 4 * i..28 + 4 * i].try_into().unwrap());
                if count[i] == 0 {
                    0.0
                } else {
                    f64::from(p) * f64::from(count[i])
                }
            })
            .collect();
        Ok(ProbabilityGrid {
            width,
            height,
            stride,
            patch_size,
            acc,
            count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub patch_size: usize,
    pub missing_threshold: f64,
    pub covered_pixels: usize,
    pub stats: ScanStats,
}

/// Write `grid.bin` and `grid.json` into `dir`.
pub fn save_grid(grid: &ProbabilityGrid, config: &ScanConfig, stats: ScanStats, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("grid.bin"), grid.to_bytes())?;
    let meta = GridMetadata {
        width: grid.width,
        height: grid.height,
        stride: grid.stride,
        patch_size: grid.patch_size,
        missing_threshold: config.missing_threshold,
        covered_pixels: grid.covered_pixels(),
        stats,
    };
    fs::write(dir.join("grid.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<ProbabilityGrid> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    ProbabilityGrid::from_bytes(&fs::read(path)?)
}

fn masked_out(ortho: &Orthomosaic, w: &PatchWindow, config: &ScanConfig) -> bool {
    if ortho.nodata_fraction(w) >= config.missing_threshold {
        return true;
    }
    let m = config.blank_margin;
    m > 0
        && ortho.masked_in_rect(
            w.x0.saturating_sub(m),
            w.y0.saturating_sub(m),
            w.x0 + w.size + m,
            w.y0 + w.size + m,
        ) > 0
}

/// Probability of every window of the stride grid, row-major.
pub fn score_windows(
    ortho: &Orthomosaic,
    scorer: &dyn PatchScorer,
    config: &ScanConfig,
) -> Result<(Vec<f64>, ScanStats)> {
    config.validate()?;
    let windows = window_grid(ortho.width(), ortho.height(), config.patch_size, config.stride);
    if windows.is_empty() {
        return Err(Error::invalid(format!(
            "raster {}x{} is smaller than the {}px patch",
            ortho.width(),
            ortho.height(),
            config.patch_size
        )));
    }
    let work = || -> Result<Vec<Vec<f64>>> {
        windows
            .par_chunks(config.batch_size)
            .map(|chunk| {
                let mut probs = vec![0.0; chunk.len()];
                let mut live = Vec::with_capacity(chunk.len());
                let mut patches = Vec::with_capacity(chunk.len());
                for (k, w) in chunk.iter().enumerate() {
                    if !masked_out(ortho, w, config) {
                        live.push(k);
                        patches.push(ortho.extract_patch(w)?);
                    }
                }
                if patches.is_empty() {
                    return Ok(probs);
                }
                let scores = scorer.score_batch(&patches).map_err(|e| {
                    let w = chunk[live[0]];
                    Error::Runtime(format!(
                        "scoring batch starting at window ({}, {}): {e}",
                        w.x0, w.y0
                    ))
                })?;
                if scores.len() != live.len() {
                    return Err(Error::Runtime(format!(
                        "scorer returned {} values for {} patches",
                        scores.len(),
                        live.len()
                    )));
                }
                for (&k, s) in live.iter().zip(scores) {
                    if !(0.0..=1.0).contains(&s) {
                        let w = chunk[k];
                        return Err(Error::Runtime(format!(
                            "window ({}, {}) scored {s}, outside [0, 1]",
                            w.x0, w.y0
                        )));
                    }
                    probs[k] = s;
                }
                Ok(probs)
            })
            .collect()
    };
    let chunks = if config.workers == 0 {
        work()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Runtime(e.to_string()))?
            .install(work)?
    };
    let probs: Vec<f64> = chunks.concat();
    let skipped = windows.iter().filter(|w| masked_out(ortho, w, config)).count();
    let stats = ScanStats {
        windows: windows.len(),
        scored: windows.len() - skipped,
        skipped_masked: skipped,
    };
    Ok((probs, stats))
}

pub fn scan(ortho: &Orthomosaic, scorer: &dyn PatchScorer, config: &ScanConfig) -> Result<(ProbabilityGrid, ScanStats)> {
    let (probs, stats) = score_windows(ortho, scorer, config)?;
    let grid = ProbabilityGrid::from_window_probs(
        ortho.width(),
        ortho.height(),
        config.patch_size,
        config.stride,
        &probs,
    )?;
    Ok((grid, stats))
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [10.0, 7.0, 34.0]),
    (0.25, [80.0, 18.0, 110.0]),
    (0.5, [185.0, 55.0, 112.0]),
    (0.75, [245.0, 140.0, 120.0]),
    (1.0, [252.0, 250.0, 200.0]),
];

pub const NODATA_COLOR: [u8; 3] = [128, 128, 128];

/// Dark-to-bright color for a probability; every channel is nondecreasing in `p`.
pub fn ramp_color(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    let k = RAMP.windows(2).position(|w| p <= w[1].0).unwrap_or(RAMP.len() - 2);
    let ((p0, c0), (p1, c1)) = (RAMP[k], RAMP[k + 1]);
    let t = (p - p0) / (p1 - p0);
    [0, 1, 2].map(|i| (c0[i] + t * (c1[i] - c0[i])).round() as u8)
}

pub fn render_heatmap(grid: &ProbabilityGrid) -> RgbImage {
    RgbImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        image::Rgb(grid.prob(x as usize, y as usize).map_or(NODATA_COLOR, ramp_color))
    })
}

/// Blend the heatmap over the raster where `prob >= threshold`.
pub fn overlay(ortho: &Orthomosaic, grid: &ProbabilityGrid, alpha: f64, threshold: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} not in [0, 1]")));
    }
    if (grid.width, grid.height) != (ortho.width(), ortho.height()) {
        return Err(Error::invalid("grid and raster sizes differ"));
    }
    Ok(RgbImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base = ortho.rgb(x, y);
        match grid.prob(x, y) {
            Some(p) if p >= threshold => {
                let heat = ramp_color(p);
                image::Rgb([0, 1, 2].map(|i| {
                    ((1.0 - alpha) * f64::from(base[i]) + alpha * f64::from(heat[i])).round() as u8
                }))
            }
            _ => image::Rgb(base),
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    AcceptedPalm,
    RejectedNonpalm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWindow {
    pub id: String,
    pub window: PatchWindow,
    /// Pixel holding the peak probability.
    pub peak: (usize, usize),
    pub score: f64,
    pub status: CandidateStatus,
}

/// Peaks of the grid at or above `threshold`, thinned by greedy suppression.
///
/// A peak is a maximal plateau (8-connected equal values with no higher
/// neighbor), represented by its member nearest the plateau centroid. Peaks
/// are accepted in descending score order (ties row-major); one closer than
/// `min_distance` to an accepted peak is dropped. Each survivor becomes a
/// 100×100 window centered on it and clamped inside the raster.
pub fn find_candidates(grid: &ProbabilityGrid, threshold: f64, min_distance: f64) -> Result<Vec<CandidateWindow>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} not in (0, 1)")));
    }
    let (w, h) = (grid.width, grid.height);
    if w < CANDIDATE_SIZE || h < CANDIDATE_SIZE {
        return Err(Error::invalid(format!(
            "grid {w}x{h} is smaller than a {CANDIDATE_SIZE}px candidate window"
        )));
    }
    let probs = grid.probabilities();
    let neighbors = |i: usize| {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        (-1..=1isize)
            .flat_map(move |dy| (-1..=1isize).map(move |dx| (x + dx, y + dy)))
            .filter(move |&(nx, ny)| {
                (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h
            })
            .map(move |(nx, ny)| ny as usize * w + nx as usize)
    };

    let mut seen = vec![false; w * h];
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..w * h {
        let Some(v) = probs[start] else { continue };
        if seen[start] || v < threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        members.clear();
        let mut is_max = true;
        while let Some(i) = stack.pop() {
            members.push(i);
            for n in neighbors(i) {
                match probs[n] {
                    Some(nv) if nv > v => is_max = false,
                    Some(nv) if nv == v && !seen[n] => {
                        seen[n] = true;
                        stack.push(n);
                    }
                    _ => {}
                }
            }
        }
        if !is_max {
            continue;
        }
        let k = members.len() as f64;
        let cx = members.iter().map(|&i| (i % w) as f64).sum::<f64>() / k;
        let cy = members.iter().map(|&i| (i / w) as f64).sum::<f64>() / k;
        let rep = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let d = |i: usize| ((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2);
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
            .unwrap();
        peaks.push((v, rep));
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut accepted: Vec<(f64, usize)> = Vec::new();
    for (score, i) in peaks {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let close = accepted.iter().any(|&(_, j)| {
            let (ax, ay) = ((j % w) as f64, (j / w) as f64);
            ((x - ax).powi(2) + (y - ay).powi(2)).sqrt() < min_distance
        });
        if !close {
            accepted.push((score, i));
        }
    }
    let half = CANDIDATE_SIZE / 2;
    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(n, (score, i))| {
            let (x, y) = (i % w, i / w);
            let x0 = x.saturating_sub(half).min(w - CANDIDATE_SIZE);
            let y0 = y.saturating_sub(half).min(h - CANDIDATE_SIZE);
            CandidateWindow {
                id: format!("c{n:05}"),
                window: PatchWindow::new(x0, y0, CANDIDATE_SIZE),
                peak: (x, y),
                score,
                status: CandidateStatus::Pending,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn raster(width: usize, height: usize, mask: impl Fn(usize, usize) -> bool) -> Orthomosaic {
        let rgb = (0..width * height * 3).map(|i| (i * 7 % 251) as u8).collect();
        let mask = (0..width * height).map(|i| mask(i % width, i / width)).collect();
        Orthomosaic::new(width, height, rgb, mask, GeoTransform::IDENTITY, "").unwrap()
    }

    fn grid_from(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> ProbabilityGrid {
        ProbabilityGrid {
            width,
            height,
            stride: 1,
            patch_size: 1,
            acc: (0..width * height).map(|i| f(i % width, i / width)).collect(),
            count: vec![1; width * height],
        }
    }

    #[test]
    fn constant_scorer_gives_constant_grid() {
        let o = raster(60, 60, |_, _| false);
        let (grid, stats) = scan(&o, &FnScorer(|_: &Patch| 0.7), &ScanConfig::new(40, 10)).unwrap();
        assert_eq!(stats.windows, 9);
        for p in grid.probabilities() {
            assert!((p.unwrap() - 0.7).abs() < 1e-12);
        }
        assert_eq!(grid.count[0], 1);
        assert_eq!(grid.count[30 * 60 + 30], 9);
    }

    #[test]
    fn interior_count_is_patch_over_stride_squared() {
        let o = raster(200, 200, |_, _| false);
        let (grid, _) = scan(&o, &FnScorer(|_: &Patch| 0.5), &ScanConfig::new(40, 10)).unwrap();
        assert_eq!(grid.count[100 * 200 + 100], 16);
    }

    #[test]
    fn masked_windows_vote_zero_without_scoring() {
        let o = raster(80, 40, |x, _| x < 40);
        let scorer = CountingScorer::new(FnScorer(|_: &Patch| 1.0));
        let (grid, stats) = scan(&o, &scorer, &ScanConfig::new(40, 40)).unwrap();
        assert_eq!(scorer.calls(), 1);
        assert_eq!(stats.skipped_masked, 1);
        assert_eq!(grid.prob(10, 10), Some(0.0));
        assert_eq!(grid.prob(50, 10), Some(1.0));
    }

    #[test]
    fn raster_smaller_than_patch_is_an_error() {
        let o = raster(30, 30, |_, _| false);
        assert!(scan(&o, &FnScorer(|_: &Patch| 0.5), &ScanConfig::new(40, 10)).is_err());
    }

    #[test]
    fn grid_bytes_roundtrip() {
        let o = raster(50, 45, |x, y| x + y < 10);
        let (grid, _) = scan(&o, &FnScorer(|p: &Patch| p.nodata_fraction), &ScanConfig::new(20, 7)).unwrap();
        let back = ProbabilityGrid::from_bytes(&grid.to_bytes()).unwrap();
        assert_eq!(back.count, grid.count);
        for (a, b) in back.probabilities().iter().zip(grid.probabilities()) {
            assert_eq!(a.map(|v| v as f32), b.map(|v| v as f32));
        }
    }

    #[test]
    fn ramp_is_monotone_and_heatmap_shaped() {
        let lum = |c: [u8; 3]| 0.2126 * f64::from(c[0]) + 0.7152 * f64::from(c[1]) + 0.0722 * f64::from(c[2]);
        let mut prev = ramp_color(0.0);
        for i in 1..=1000 {
            let c = ramp_color(i as f64 / 1000.0);
            assert!((0..3).all(|k| c[k] >= prev[k]));
            assert!(lum(c) >= lum(prev));
            prev = c;
        }
        let zero = grid_from(100, 80, |_, _| 0.0);
        let img = render_heatmap(&zero);
        assert_eq!(img.dimensions(), (100, 80));
        assert!(img.pixels().all(|p| p.0 == ramp_color(0.0)));
    }

    #[test]
    fn overlay_identity_cases() {
        let o = raster(30, 20, |x, _| x == 3);
        let g = grid_from(30, 20, |x, y| (x + y) as f64 / 50.0);
        let o_ref = &o;
        let base: Vec<u8> = (0..20).flat_map(|y| (0..30).flat_map(move |x| o_ref.rgb(x, y))).collect();
        assert_eq!(overlay(&o, &g, 0.0, 0.0).unwrap().into_raw(), base);
        assert_eq!(overlay(&o, &g, 0.8, 1.01).unwrap().into_raw(), base);
        let full = overlay(&o, &g, 1.0, 0.0).unwrap();
        assert_eq!(full.into_raw(), render_heatmap(&g).into_raw());
    }

    #[test]
    fn candidates_single_peak_and_suppression() {
        let one = grid_from(200, 200, |x, y| if (x, y) == (120, 90) { 0.95 } else { 0.3 });
        let c = find_candidates(&one, 0.5, 50.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].peak, (120, 90));
        assert_eq!(c[0].window, PatchWindow::new(70, 40, 100));
        assert_eq!(c[0].id, "c00000");

        let two = grid_from(200, 200, |x, y| match (x, y) {
            (60, 100) => 0.9,
            (90, 100) => 0.8,
            _ => 0.1,
        });
        let c = find_candidates(&two, 0.5, 50.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].peak, (60, 100));
        assert_eq!(find_candidates(&two, 0.5, 20.0).unwrap().len(), 2);

        let low = grid_from(150, 150, |_, _| 0.4);
        assert!(find_candidates(&low, 0.5, 10.0).unwrap().is_empty());
    }

    #[test]
    fn plateau_peak_uses_centroid_and_clamps() {
        let g = grid_from(120, 110, |x, y| if (2..=6).contains(&x) && (3..=5).contains(&y) { 0.8 } else { 0.2 });
        let c = find_candidates(&g, 0.5, 10.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].peak, (4, 4));
        assert_eq!(c[0].window, PatchWindow::new(0, 0, 100));
    }
}
