//! Labeled patch sets: extraction from survey points, random negative sampling,
//! stratified splitting, k-fold partitioning, augmentation and on-disk layout.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Orthomosaic, Patch, PatchWindow};
use crate::util::{fnv1a, substream};

/// Windows at or above this missing-pixel fraction count as blank.
pub const MISSING_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Palm,
    #[serde(rename = "nonpalm")]
    NonPalm,
}

impl Label {
    /// Output column of the classification head. Palm is class 0.
    pub fn class_index(self) -> usize {
        match self {
            Label::Palm => 0,
            Label::NonPalm => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        if i == 0 {
            Label::Palm
        } else {
            Label::NonPalm
        }
    }

    /// Binary metric encoding: 1 for palm (positive), 0 otherwise.
    pub fn positive(self) -> u8 {
        u8::from(self == Label::Palm)
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "palm" | "1" => Ok(Label::Palm),
            "nonpalm" | "non-palm" | "non_palm" | "0" => Ok(Label::NonPalm),
            other => Err(Error::invalid(format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Palm => "palm",
            Label::NonPalm => "nonpalm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Fine40,
    Coarse100,
}

impl Scale {
    pub fn patch_size(self) -> usize {
        match self {
            Scale::Fine40 => 40,
            Scale::Coarse100 => 100,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" | "fine40" | "40" => Ok(Scale::Fine40),
            "coarse" | "coarse100" | "100" => Ok(Scale::Coarse100),
            other => Err(Error::invalid(format!("unknown scale {other:?}"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Fine40 => "fine40",
            Scale::Coarse100 => "coarse100",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Survey,
    Sampled,
    Triage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub id: String,
    pub label: Label,
    pub scale: Scale,
    pub provenance: Provenance,
    pub patch: Patch,
}

/// Patches of one scale with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    scale: Scale,
    items: Vec<LabeledPatch>,
}

impl PatchSet {
    pub fn new(scale: Scale, items: Vec<LabeledPatch>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if it.scale != scale || it.patch.size() != scale.patch_size() {
                return Err(Error::invalid(format!(
                    "item {} ({}, {} px) does not belong to a {scale} set",
                    it.id,
                    it.scale,
                    it.patch.size()
                )));
            }
            if !seen.insert(it.id.as_str()) {
                return Err(Error::invalid(format!("duplicate patch id {}", it.id)));
            }
        }
        Ok(PatchSet { scale, items })
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn items(&self) -> &[LabeledPatch] {
        &self.items
    }

    pub fn into_items(self) -> Vec<LabeledPatch> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    /// Concatenate two sets of the same scale.
    pub fn merge(self, other: PatchSet) -> Result<Self> {
        let mut items = self.items;
        items.extend(other.items);
        PatchSet::new(self.scale, items)
    }

    /// Subset by index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        PatchSet {
            scale: self.scale,
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

/// A labeled location in projected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: Label,
}

#[derive(Debug, Deserialize)]
struct SurveyRow {
    id: String,
    x: f64,
    y: f64,
    label: String,
}

/// Read survey points from a CSV with header `id,x,y,label`.
pub fn read_survey_csv(path: impl AsRef<Path>) -> Result<Vec<SurveyPoint>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "x", "y", "label"] {
        return Err(Error::invalid(format!(
            "{}: expected header id,x,y,label",
            path.display()
        )));
    }
    rdr.deserialize::<SurveyRow>()
        .map(|row| {
            let row = row?;
            Ok(SurveyPoint {
                id: row.id,
                x: row.x,
                y: row.y,
                label: row.label.parse()?,
            })
        })
        .collect()
}

pub fn write_survey_csv(path: impl AsRef<Path>, points: &[SurveyPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "x", "y", "label"])?;
    for p in points {
        w.write_record([p.id.clone(), p.x.to_string(), p.y.to_string(), p.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A survey point that produced no patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub id: String,
    pub reason: String,
}

/// One centered patch per point; points whose window leaves the raster are skipped.
pub fn extract_points(
    ortho: &Orthomosaic,
    points: &[SurveyPoint],
    scale: Scale,
    provenance: Provenance,
) -> Result<(PatchSet, Vec<SkippedPoint>)> {
    let size = scale.patch_size();
    let mut items = Vec::with_capacity(points.len());
    let mut skipped = Vec::new();
    for p in points {
        let window = ortho
            .geo_to_pixel(p.x, p.y)
            .map_err(|e| e.to_string())
            .and_then(|(cx, cy)| {
                PatchWindow::centered(cx, cy, size)
                    .filter(|w| w.fits(ortho.width(), ortho.height()))
                    .ok_or_else(|| format!("{size} px window around ({cx}, {cy}) overhangs the raster"))
            });
        match window {
            Ok(w) => items.push(LabeledPatch {
                id: p.id.clone(),
                label: p.label,
                scale,
                provenance,
                patch: ortho.extract_patch(&w)?,
            }),
            Err(reason) => skipped.push(SkippedPoint {
                id: p.id.clone(),
                reason,
            }),
        }
    }
    Ok((PatchSet::new(scale, items)?, skipped))
}

/// Fine-scale (40 px) patches around vetted palm and non-palm points.
///
/// List membership decides the label, whatever the points carry.
pub fn extract_fine(
    ortho: &Orthomosaic,
    palm_points: &[SurveyPoint],
    nonpalm_points: &[SurveyPoint],
) -> Result<(PatchSet, Vec<SkippedPoint>)> {
    if palm_points.is_empty() && nonpalm_points.is_empty() {
        return Err(Error::invalid("no survey points given"));
    }
    let relabel = |pts: &[SurveyPoint], label| -> Vec<SurveyPoint> {
        pts.iter()
            .map(|p| SurveyPoint {
                label,
                ..p.clone()
            })
            .collect()
    };
    let mut points = relabel(palm_points, Label::Palm);
    points.extend(relabel(nonpalm_points, Label::NonPalm));
    extract_points(ortho, &points, Scale::Fine40, Provenance::Survey)
}

/// Draw `n` random non-palm windows away from every palm point.
///
/// Accepted windows have their center at least `exclusion_radius` pixels from
/// every palm point and a missing-pixel fraction below [`MISSING_THRESHOLD`].
pub fn sample_nonpalm(
    ortho: &Orthomosaic,
    palm_points: &[(f64, f64)],
    n: usize,
    exclusion_radius: f64,
    scale: Scale,
    seed: u64,
) -> Result<PatchSet> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let size = scale.patch_size();
    if size > ortho.width() || size > ortho.height() {
        return Err(Error::InsufficientArea {
            wanted: n,
            found: 0,
            attempts: 0,
        });
    }
    let palms: Vec<(f64, f64)> = palm_points
        .iter()
        .map(|&(x, y)| ortho.geotransform.inverse(x, y))
        .collect::<Result<_>>()?;
    let r2 = exclusion_radius * exclusion_radius;
    let budget = (n * 200).max(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut attempts = 0;
    while items.len() < n && attempts < budget {
        attempts += 1;
        let w = PatchWindow::new(
            rng.gen_range(0..=ortho.width() - size),
            rng.gen_range(0..=ortho.height() - size),
            size,
        );
        let (cx, cy) = w.center();
        let clear = palms
            .iter()
            .all(|&(px, py)| (cx - px).powi(2) + (cy - py).powi(2) >= r2);
        if !clear || ortho.nodata_fraction(&w) >= MISSING_THRESHOLD {
            continue;
        }
        items.push(LabeledPatch {
            id: format!("sampled-{:06}", items.len()),
            label: Label::NonPalm,
            scale,
            provenance: Provenance::Sampled,
            patch: ortho.extract_patch(&w)?,
        });
    }
    if items.len() < n {
        return Err(Error::InsufficientArea {
            wanted: n,
            found: items.len(),
            attempts,
        });
    }
    PatchSet::new(scale, items)
}

fn class_groups(labels: &[Label], rng: &mut ChaCha8Rng) -> [Vec<usize>; 2] {
    let mut groups = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        groups[l.class_index()].push(i);
    }
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups
}

/// Stratified train/test partition of item indices; both lists sorted.
///
/// Each class contributes `round(fraction * count)` items to the training
/// side, clamped so both sides keep at least one item of every class.
pub fn stratified_split(
    labels: &[Label],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = class_groups(labels, &mut rng);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::invalid(format!(
                "class {} has {} items, need at least 2 to split",
                Label::from_class_index(class),
                g.len()
            )));
        }
        let k = ((train_fraction * g.len() as f64).round() as usize).clamp(1, g.len() - 1);
        train.extend_from_slice(&g[..k]);
        test.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified k-fold validation index sets (each sorted).
///
/// Items are dealt round-robin class by class, so fold sizes differ by at most
/// one overall and per class.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("k = {k}, need at least 2 folds")));
    }
    if k > labels.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} items", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for (j, i) in class_groups(labels, &mut rng).into_iter().flatten().enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified split of a patch set.
pub fn train_test_split(set: &PatchSet, train_fraction: f64, seed: u64) -> Result<(PatchSet, PatchSet)> {
    let (train, test) = stratified_split(&set.labels(), train_fraction, seed)?;
    Ok((set.select(&train), set.select(&test)))
}

/// `(training part, validation part)` per fold.
pub fn kfold(set: &PatchSet, k: usize, seed: u64) -> Result<Vec<(PatchSet, PatchSet)>> {
    let folds = stratified_kfold(&set.labels(), k, seed)?;
    Ok(folds
        .iter()
        .map(|val| {
            let train = complement(set.len(), val);
            (set.select(&train), set.select(val))
        })
        .collect())
}

/// Indices in `0..n` not in the sorted slice `taken`.
pub fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    let mut it = taken.iter().peekable();
    (0..n)
        .filter(|i| {
            if it.peek() == Some(&i) {
                it.next();
                false
            } else {
                true
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Half-ranges of the multiplicative jitter factors, drawn from `[1 - r, 1 + r]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Half-range of the hue rotation, in turns.
    pub hue: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No flips and no jitter.
    pub fn identity() -> Self {
        AugmentationConfig {
            p_hflip: 0.0,
            p_vflip: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_hflip, self.p_vflip];
        let ranges = [self.brightness, self.contrast, self.saturation, self.hue];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("flip probabilities must lie in [0, 1]"));
        }
        if ranges.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid("jitter half-ranges must be finite and non-negative"));
        }
        Ok(())
    }

    /// Random stream for one item in one epoch, independent of processing order.
    pub fn item_rng(&self, epoch: u64, item_id: &str) -> ChaCha8Rng {
        substream(self.seed, epoch, fnv1a(item_id.as_bytes()))
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Flip, then color-jitter a patch.
///
/// Draws are taken in a fixed order whatever the configuration, so one stream
/// always maps to the same transform family.
pub fn augment<R: Rng + ?Sized>(patch: &Patch, cfg: &AugmentationConfig, rng: &mut R) -> Patch {
    let hflip = rng.gen::<f64>() < cfg.p_hflip;
    let vflip = rng.gen::<f64>() < cfg.p_vflip;
    let mut factor = |r: f64| 1.0 + r * (2.0 * rng.gen::<f64>() - 1.0);
    let brightness = factor(cfg.brightness) as f32;
    let contrast = factor(cfg.contrast) as f32;
    let saturation = factor(cfg.saturation) as f32;
    let hue = (cfg.hue * (2.0 * rng.gen::<f64>() - 1.0)) as f32;

    let n = patch.size();
    let mut out = patch.clone();
    if hflip || vflip {
        for y in 0..n {
            for x in 0..n {
                let sx = if hflip { n - 1 - x } else { x };
                let sy = if vflip { n - 1 - y } else { y };
                let d = (y * n + x) * 3;
                out.pixels[d..d + 3].copy_from_slice(&patch.rgb(sx, sy));
            }
        }
    }
    let jitter = brightness != 1.0 || contrast != 1.0 || saturation != 1.0 || hue != 0.0;
    if !jitter {
        return out;
    }

    let mut px: Vec<f32> = out.pixels.iter().map(|&v| f32::from(v)).collect();
    let clamp = |v: f32| v.clamp(0.0, 255.0);
    if brightness != 1.0 {
        px.iter_mut().for_each(|v| *v = clamp(*v * brightness));
    }
    if contrast != 1.0 {
        let mean = px.chunks_exact(3).map(gray).sum::<f32>() / (n * n) as f32;
        px.iter_mut()
            .for_each(|v| *v = clamp(contrast * *v + (1.0 - contrast) * mean));
    }
    if saturation != 1.0 {
        for c in px.chunks_exact_mut(3) {
            let g = gray(c);
            c.iter_mut()
                .for_each(|v| *v = clamp(saturation * *v + (1.0 - saturation) * g));
        }
    }
    if hue != 0.0 {
        for c in px.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(c[0] / 255.0, c[1] / 255.0, c[2] / 255.0);
            let (r, g, b) = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
            c[0] = clamp(r * 255.0);
            c[1] = clamp(g * 255.0);
            c[2] = clamp(b * 255.0);
        }
    }
    for (o, v) in out.pixels.iter_mut().zip(&px) {
        *o = v.round() as u8;
    }
    out
}

fn gray(c: &[f32]) -> f32 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    scale: Scale,
    items: Vec<ManifestItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestItem {
    id: String,
    label: Label,
    provenance: Provenance,
    window: PatchWindow,
    nodata_fraction: f64,
    file: String,
}

/// Write `manifest.json` plus one PNG per patch into `dir`.
pub fn save_patch_set(set: &PatchSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(set.len());
    for (i, it) in set.items.iter().enumerate() {
        let file = format!("{i:06}.png");
        let n = it.patch.size() as u32;
        image::RgbImage::from_raw(n, n, it.patch.pixels.clone())
            .expect("patch buffer is size*size*3")
            .save_with_format(dir.join(&file), image::ImageFormat::Png)?;
        items.push(ManifestItem {
            id: it.id.clone(),
            label: it.label,
            provenance: it.provenance,
            window: it.patch.window,
            nodata_fraction: it.patch.nodata_fraction,
            file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scale: set.scale,
        items,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_patch_set(dir: impl AsRef<Path>) -> Result<PatchSet> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let items = manifest
        .items
        .into_iter()
        .map(|m| {
            let img = image::open(dir.join(&m.file))?.to_rgb8();
            Ok(LabeledPatch {
                id: m.id,
                label: m.label,
                scale: manifest.scale,
                provenance: m.provenance,
                patch: Patch::from_rgb(m.window, img.into_raw(), m.nodata_fraction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PatchSet::new(manifest.scale, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn gradient_ortho(w: usize, h: usize) -> Orthomosaic {
        let rgb = (0..w * h)
            .flat_map(|i| [(i % w) as u8, (i / w) as u8, 77])
            .collect();
        Orthomosaic::new(w, h, rgb, vec![false; w * h], GeoTransform::IDENTITY, "").unwrap()
    }

    fn pt(id: &str, x: f64, y: f64, label: Label) -> SurveyPoint {
        SurveyPoint {
            id: id.into(),
            x,
            y,
            label,
        }
    }

    fn patch_of(pixels: Vec<u8>, n: usize) -> Patch {
        Patch::from_rgb(PatchWindow::new(0, 0, n), pixels, 0.0).unwrap()
    }

    #[test]
    fn centered_extraction() {
        let o = gradient_ortho(200, 200);
        let (set, skipped) =
            extract_fine(&o, &[pt("a", 100.5, 100.5, Label::NonPalm)], &[]).unwrap();
        assert!(skipped.is_empty());
        let it = &set.items()[0];
        assert_eq!(it.label, Label::Palm);
        assert_eq!(it.patch.window, PatchWindow::new(80, 80, 40));
    }

    #[test]
    fn edge_point_is_skipped_and_reported() {
        let o = gradient_ortho(200, 200);
        let (set, skipped) = extract_fine(
            &o,
            &[pt("edge", 5.0, 100.0, Label::Palm)],
            &[pt("ok", 50.0, 50.0, Label::NonPalm)],
        )
        .unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].id, "edge");
        assert!(extract_fine(&o, &[], &[]).is_err());
    }

    #[test]
    fn nonpalm_sampling_respects_exclusion() {
        let o = gradient_ortho(400, 400);
        let palm = [(200.0, 200.0)];
        let a = sample_nonpalm(&o, &palm, 10, 100.0, Scale::Fine40, 3).unwrap();
        for it in a.items() {
            let (cx, cy) = it.patch.window.center();
            assert!(((cx - 200.0).powi(2) + (cy - 200.0).powi(2)).sqrt() >= 100.0);
            assert_eq!(it.label, Label::NonPalm);
        }
        let b = sample_nonpalm(&o, &palm, 10, 100.0, Scale::Fine40, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonpalm_sampling_fails_on_masked_raster() {
        let o = Orthomosaic::new(100, 100, vec![0; 30000], vec![true; 10000], GeoTransform::IDENTITY, "")
            .unwrap();
        assert!(matches!(
            sample_nonpalm(&o, &[], 5, 10.0, Scale::Fine40, 1),
            Err(Error::InsufficientArea { found: 0, .. })
        ));
    }

    #[test]
    fn split_counts_match_rounding() {
        let mut labels = vec![Label::Palm; 6000];
        labels.extend(vec![Label::NonPalm; 6000]);
        let (tr, te) = stratified_split(&labels, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (9600, 2400));

        let mut labels = vec![Label::Palm; 3367];
        labels.extend(vec![Label::NonPalm; 4091]);
        let (tr, te) = stratified_split(&labels, 0.8, 1).unwrap();
        assert!(tr.len() == 5966 || tr.len() == 5967, "{}", tr.len());
        assert_eq!(tr.len() + te.len(), 7458);
        let palm_train = tr.iter().filter(|&&i| labels[i] == Label::Palm).count();
        assert!((palm_train as f64 - 0.8 * 3367.0).abs() <= 1.0);

        assert_eq!(stratified_split(&labels, 0.8, 9).unwrap(), stratified_split(&labels, 0.8, 9).unwrap());
        assert!(stratified_split(&[Label::Palm, Label::NonPalm, Label::NonPalm], 0.8, 0).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let labels = vec![Label::Palm; 9600];
        let folds = stratified_kfold(&labels, 5, 0).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1920));

        let labels = vec![Label::Palm, Label::NonPalm, Label::Palm, Label::NonPalm, Label::Palm, Label::Palm, Label::NonPalm];
        let mut sizes: Vec<_> = stratified_kfold(&labels, 5, 0).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, [2, 2, 1, 1, 1]);
        assert!(stratified_kfold(&labels, 8, 0).is_err());
        assert!(stratified_kfold(&labels, 1, 0).is_err());
    }

    #[test]
    fn hflip_is_an_involution() {
        let p = patch_of((0..40 * 40 * 3).map(|i| (i * 7 % 256) as u8).collect(), 40);
        let cfg = AugmentationConfig {
            p_hflip: 1.0,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&p, &cfg, &mut rng);
        assert_ne!(once, p);
        assert_eq!(once.rgb(0, 3), p.rgb(39, 3));
        assert_eq!(augment(&once, &cfg, &mut rng), p);
    }

    #[test]
    fn identity_config_is_identity() {
        let p = patch_of((0..40 * 40 * 3).map(|i| (i * 13 % 256) as u8).collect(), 40);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment(&p, &AugmentationConfig::identity(), &mut rng), p);
    }

    #[test]
    fn augmentation_is_reproducible() {
        let p = patch_of((0..40 * 40 * 3).map(|i| (i * 31 % 256) as u8).collect(), 40);
        let cfg = AugmentationConfig::default();
        let a = augment(&p, &cfg, &mut cfg.item_rng(3, "x"));
        let b = augment(&p, &cfg, &mut cfg.item_rng(3, "x"));
        assert_eq!(a.pixels, b.pixels);
        let c = augment(&p, &cfg, &mut cfg.item_rng(4, "x"));
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn hsv_roundtrip() {
        for c in [[0.2f32, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let (h, s, v) = rgb_to_hsv(c[0], c[1], c[2]);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            assert!((r - c[0]).abs() < 1e-6 && (g - c[1]).abs() < 1e-6 && (b - c[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_set_dir_roundtrip() {
        let o = gradient_ortho(120, 120);
        let (set, _) = extract_fine(
            &o,
            &[pt("p1", 30.0, 30.0, Label::Palm)],
            &[pt("n1", 80.0, 70.0, Label::NonPalm)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_patch_set(&set, dir.path()).unwrap();
        assert_eq!(load_patch_set(dir.path()).unwrap(), set);
    }

    #[test]
    fn survey_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![pt("a", 1.5, -2.0, Label::Palm), pt("b", 3.0, 4.25, Label::NonPalm)];
        write_survey_csv(&path, &pts).unwrap();
        assert_eq!(read_survey_csv(&path).unwrap(), pts);
        std::fs::write(&path, "x,y\n1,2\n").unwrap();
        assert!(read_survey_csv(&path).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let o = gradient_ortho(120, 120);
        let (set, _) = extract_fine(&o, &[pt("d", 30.0, 30.0, Label::Palm)], &[]).unwrap();
        let dup = set.items()[0].clone();
        assert!(PatchSet::new(Scale::Fine40, vec![dup.clone(), dup]).is_err());
    }
}
