//! Procedural orthomosaics with planted palms and look-alike distractors.
//!
//! Palms are drawn as bright radial fronds over a low-frequency background;
//! distractors are discs filled with soft blobs in the same colors, so the two
//! share color statistics and differ in structure.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_survey_csv, Label, SurveyPoint};
use crate::error::{Error, Result};
use crate::raster::{write_png, GeoTransform, Orthomosaic};
use crate::util::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_palms: usize,
    pub n_distractors: usize,
    /// Inclusive frond count range per palm.
    pub fronds: (usize, usize),
    /// Crown radius range in pixels.
    pub crown_radius: (f64, f64),
    /// Peak deviation of the background brightness field, in 8-bit levels.
    pub noise_amplitude: f64,
    /// Width of the nodata frame around the raster.
    pub masked_border: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 800,
            height: 800,
            n_palms: 25,
            n_distractors: 25,
            fronds: (7, 11),
            crown_radius: (15.0, 20.0),
            noise_amplitude: 25.0,
            masked_border: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.crown_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::invalid(format!("crown radius range {r0}..{r1} is invalid")));
        }
        if self.fronds.0 == 0 || self.fronds.0 > self.fronds.1 {
            return Err(Error::invalid("frond count range is invalid"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("canvas must be non-empty"));
        }
        if self.noise_amplitude.is_nan() || self.noise_amplitude < 0.0 {
            return Err(Error::invalid("noise amplitude must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    /// Pixel holding the object's center.
    pub col: usize,
    pub row: usize,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub ortho: Orthomosaic,
    pub palms: Vec<PlantedObject>,
    pub distractors: Vec<PlantedObject>,
}

const PLACEMENT_ATTEMPTS: usize = 20_000;
// Keep a 40 px patch around every object clear of the masked frame.
const CLEARANCE: f64 = 21.0;

// Substream tags.
const TAG_PLACE: u64 = 1;
const TAG_BACKGROUND: u64 = 2;
const TAG_OBJECT: u64 = 3;

struct Canvas {
    width: usize,
    height: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let p = &mut self.px[y * self.width + x];
        for k in 0..3 {
            p[k] = p[k] * (1.0 - a) + color[k] * a;
        }
    }

    fn bbox(&self, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - r - 2.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 2.0).ceil() as usize).min(self.width);
        let y1 = ((cy + r + 2.0).ceil() as usize).min(self.height);
        (lo(cx), lo(cy), x1, y1)
    }
}

/// Smooth random field in `[-1, 1]`: bilinear interpolation of lattice values.
fn value_noise<R: Rng>(rng: &mut R, width: usize, height: usize, cell: usize) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let (gy, ty) = (fy as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let (gx, tx) = (fx as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
            let bottom = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn background(config: &SynthConfig) -> Canvas {
    let mut rng = substream(config.seed, TAG_BACKGROUND, 0);
    let (w, h) = (config.width, config.height);
    let bright = value_noise(&mut rng, w, h, 64);
    let tint = value_noise(&mut rng, w, h, 96);
    let amp = config.noise_amplitude as f32;
    let px = (0..w * h)
        .map(|i| {
            let b = amp * bright[i];
            let t = 0.5 * amp * tint[i];
            let grain = rng.gen_range(-4.0..=4.0f32);
            [
                105.0 + b + t + grain,
                100.0 + b + 0.3 * t + grain,
                70.0 + 0.6 * b - 0.4 * t + grain,
            ]
        })
        .collect();
    Canvas { width: w, height: h, px }
}

fn frond_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [
        rng.gen_range(135.0..175.0),
        rng.gen_range(185.0..220.0),
        rng.gen_range(75.0..110.0),
    ]
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> (f64, f64) {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    (((px - qx).powi(2) + (py - qy).powi(2)).sqrt(), t)
}

fn draw_palm<R: Rng>(canvas: &mut Canvas, obj: &PlantedObject, fronds: usize, rng: &mut R) {
    let (cx, cy) = (obj.col as f64 + 0.5, obj.row as f64 + 0.5);
    let color = frond_color(rng);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / fronds as f64;
    let segs: Vec<(f64, f64, f64)> = (0..fronds)
        .map(|k| {
            let a = phase + k as f64 * step + rng.gen_range(-0.2..0.2) * step;
            let len = obj.radius * rng.gen_range(0.8..1.0);
            (cx + len * a.cos(), cy + len * a.sin(), len)
        })
        .collect();
    let (x0, y0, x1, y1) = canvas.bbox(cx, cy, obj.radius);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut cover = 0.0f64;
            let mut shade = 0.0f64;
            for &(ex, ey, _) in &segs {
                let (d, t) = segment_distance(px, py, cx, cy, ex, ey);
                let half = 0.5 * (2.8 * (1.0 - t) + 0.9);
                let c = (half + 0.5 - d).clamp(0.0, 1.0);
                if c > cover {
                    cover = c;
                    shade = 0.8 + 0.2 * (1.0 - t);
                }
            }
            let col = color.map(|v| v * shade as f32);
            canvas.blend(x, y, col, cover as f32);
            // Shadowed gaps between fronds.
            let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if cover < 0.5 && r < obj.radius * 0.9 {
                let dark = canvas.px[y * canvas.width + x].map(|v| v * 0.75);
                canvas.blend(x, y, dark, 0.6 * (1.0 - cover as f32));
            }
        }
    }
    let core = [color[0] + 40.0, color[1] + 25.0, color[2] + 20.0];
    let (x0, y0, x1, y1) = canvas.bbox(cx, cy, 2.5);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            canvas.blend(x, y, core, (2.5 - d).clamp(0.0, 1.0) as f32);
        }
    }
}

fn draw_distractor<R: Rng>(canvas: &mut Canvas, obj: &PlantedObject, rng: &mut R) {
    let (cx, cy) = (obj.col as f64 + 0.5, obj.row as f64 + 0.5);
    let bright = frond_color(rng);
    let dark = [80.0, 95.0, 55.0];
    let base = [0, 1, 2].map(|k| 0.5 * (bright[k] + dark[k]));
    let r = obj.radius;
    let (x0, y0, x1, y1) = canvas.bbox(cx, cy, r);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            canvas.blend(x, y, base, (r + 0.5 - d).clamp(0.0, 1.0) as f32);
        }
    }
    let blobs = (r * r / 6.0) as usize;
    for _ in 0..blobs {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = r * rng.gen::<f64>().sqrt() * 0.9;
        let (bx, by) = (cx + rho * a.cos(), cy + rho * a.sin());
        let sigma = rng.gen_range(2.5..5.0);
        let color = if rng.gen_bool(0.5) { bright } else { dark };
        let (x0, y0, x1, y1) = canvas.bbox(bx, by, 2.5 * sigma);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) > r * r {
                    continue;
                }
                let d2 = (px - bx).powi(2) + (py - by).powi(2);
                canvas.blend(x, y, color, (0.7 * (-d2 / (2.0 * sigma * sigma)).exp()) as f32);
            }
        }
    }
}

fn place(config: &SynthConfig) -> Result<(Vec<PlantedObject>, Vec<PlantedObject>)> {
    let mut rng = substream(config.seed, TAG_PLACE, 0);
    let total = config.n_palms + config.n_distractors;
    let margin = config.masked_border as f64 + CLEARANCE.max(config.crown_radius.1);
    let (w, h) = (config.width as f64, config.height as f64);
    if w - margin <= margin || h - margin <= margin {
        return Err(Error::InsufficientArea {
            wanted: total,
            found: 0,
            attempts: 0,
        });
    }
    let mut placed: Vec<PlantedObject> = Vec::with_capacity(total);
    let mut attempts = 0;
    while placed.len() < total && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let radius = rng.gen_range(config.crown_radius.0..=config.crown_radius.1);
        let cand = PlantedObject {
            col: rng.gen_range(margin..w - margin) as usize,
            row: rng.gen_range(margin..h - margin) as usize,
            radius,
        };
        let clear = placed.iter().all(|o| {
            let d = ((o.col as f64 - cand.col as f64).powi(2) + (o.row as f64 - cand.row as f64).powi(2)).sqrt();
            d >= o.radius + cand.radius + 4.0
        });
        if clear {
            placed.push(cand);
        }
    }
    if placed.len() < total {
        return Err(Error::InsufficientArea {
            wanted: total,
            found: placed.len(),
            attempts,
        });
    }
    let distractors = placed.split_off(config.n_palms);
    Ok((placed, distractors))
}

/// Render a scene; identical configs give bitwise-identical rasters.
pub fn generate(config: &SynthConfig) -> Result<SynthScene> {
    config.validate()?;
    let (palms, distractors) = place(config)?;
    let mut canvas = background(config);
    for (i, p) in palms.iter().enumerate() {
        let mut rng = substream(config.seed, TAG_OBJECT, i as u64);
        let fronds = rng.gen_range(config.fronds.0..=config.fronds.1);
        draw_palm(&mut canvas, p, fronds, &mut rng);
    }
    for (i, d) in distractors.iter().enumerate() {
        let mut rng = substream(config.seed, TAG_OBJECT, (palms.len() + i) as u64);
        draw_distractor(&mut canvas, d, &mut rng);
    }
    let (w, h) = (config.width, config.height);
    let b = config.masked_border;
    let mask: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            x < b || y < b || x + b >= w || y + b >= h
        })
        .collect();
    let rgb: Vec<u8> = canvas
        .px
        .iter()
        .zip(&mask)
        .flat_map(|(p, &m)| p.map(|v| if m { 0 } else { v.round().clamp(0.0, 255.0) as u8 }))
        .collect();
    let ortho = Orthomosaic::new(w, h, rgb, mask, GeoTransform::IDENTITY, "")?;
    Ok(SynthScene {
        ortho,
        palms,
        distractors,
    })
}

impl SynthScene {
    /// Ground truth as survey points at object pixel centers.
    pub fn truth(&self) -> Vec<SurveyPoint> {
        let point = |prefix: &str, i: usize, o: &PlantedObject, label| {
            let (x, y) = self.ortho.pixel_center_to_geo(o.col, o.row);
            SurveyPoint {
                id: format!("{prefix}{i:04}"),
                x,
                y,
                label,
            }
        };
        self.palms
            .iter()
            .enumerate()
            .map(|(i, o)| point("palm", i, o, Label::Palm))
            .chain(
                self.distractors
                    .iter()
                    .enumerate()
                    .map(|(i, o)| point("other", i, o, Label::NonPalm)),
            )
            .collect()
    }

    /// `per_object` points per object, offset up to `max_offset` pixels from its center.
    pub fn jittered_points(&self, label: Label, per_object: usize, max_offset: f64, seed: u64) -> Vec<SurveyPoint> {
        let objects = match label {
            Label::Palm => &self.palms,
            Label::NonPalm => &self.distractors,
        };
        let mut rng = substream(seed, label.class_index() as u64, 0x4a17);
        let mut out = Vec::with_capacity(objects.len() * per_object);
        for (i, o) in objects.iter().enumerate() {
            for k in 0..per_object {
                let (cx, cy) = self.ortho.pixel_center_to_geo(o.col, o.row);
                let (dx, dy) = if k == 0 {
                    (0.0, 0.0)
                } else {
                    (rng.gen_range(-max_offset..=max_offset), rng.gen_range(-max_offset..=max_offset))
                };
                out.push(SurveyPoint {
                    id: format!("{label}-{i:03}-{k:02}"),
                    x: cx + dx,
                    y: cy + dy,
                    label,
                });
            }
        }
        out
    }

    /// Write `ortho.png` and `truth.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_png(&self.ortho, dir.join("ortho.png"))?;
        write_survey_csv(dir.join("truth.csv"), &self.truth())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::PatchWindow;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 300,
            height: 260,
            n_palms: 4,
            n_distractors: 3,
            masked_border: 12,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.palms.len(), 4);
        assert_eq!(a.distractors.len(), 3);
        assert_eq!(a.ortho.rgb_bytes(), b.ortho.rgb_bytes());
        assert_eq!(a.palms, b.palms);
        let other = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.ortho.rgb_bytes(), other.ortho.rgb_bytes());
    }

    #[test]
    fn objects_keep_apart_and_clear_of_border() {
        let s = generate(&small()).unwrap();
        let all: Vec<_> = s.palms.iter().chain(&s.distractors).collect();
        for (i, a) in all.iter().enumerate() {
            let w = PatchWindow::centered(a.col, a.row, 40).unwrap();
            assert_eq!(s.ortho.nodata_fraction(&w), 0.0);
            for b in &all[i + 1..] {
                let d = ((a.col as f64 - b.col as f64).powi(2) + (a.row as f64 - b.row as f64).powi(2)).sqrt();
                assert!(d >= a.radius.max(b.radius));
            }
        }
    }

    #[test]
    fn masked_border_corner_is_fully_nodata() {
        let s = generate(&SynthConfig {
            masked_border: 50,
            n_palms: 2,
            n_distractors: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(s.ortho.nodata_fraction(&PatchWindow::new(0, 0, 40)), 1.0);
        assert_eq!(s.ortho.nodata_fraction(&PatchWindow::new(760, 760, 40)), 1.0);
    }

    #[test]
    fn crowded_canvas_fails_cleanly() {
        let cfg = SynthConfig {
            width: 120,
            height: 120,
            n_palms: 40,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::InsufficientArea { .. })));
    }

    #[test]
    fn truth_points_land_on_object_pixels() {
        let s = generate(&small()).unwrap();
        let truth = s.truth();
        assert_eq!(truth.len(), 7);
        for (p, o) in truth.iter().zip(s.palms.iter().chain(&s.distractors)) {
            assert_eq!(s.ortho.geo_to_pixel(p.x, p.y).unwrap(), (o.col, o.row));
        }
    }
}
