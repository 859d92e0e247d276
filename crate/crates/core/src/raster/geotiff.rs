//! Minimal GeoTIFF support: 8-bit RGB/RGBA, affine georeferencing, GDAL nodata.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use super::{split_alpha, to_rgba, GeoTransform, Orthomosaic};
use crate::error::{Error, Result};

const MODEL_PIXEL_SCALE: u16 = 33550;
const MODEL_TIEPOINT: u16 = 33922;
const MODEL_TRANSFORMATION: u16 = 34264;
const GEO_KEY_DIRECTORY: u16 = 34735;
const GDAL_NODATA: u16 = 42113;

const GT_MODEL_TYPE_KEY: u16 = 1024;
const GT_RASTER_TYPE_KEY: u16 = 1025;
const GEOGRAPHIC_TYPE_KEY: u16 = 2048;
const PROJECTED_CS_TYPE_KEY: u16 = 3072;

fn corrupt(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::CorruptContainer(format!("{}: {e}", path.display()))
}

pub(super) fn read_geotiff(path: &Path) -> Result<Orthomosaic> {
    let mut dec = Decoder::new(File::open(path)?)
        .map_err(|e| corrupt(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| corrupt(path, e))?;
    let (width, height) = (w as usize, h as usize);
    let bands = match dec.colortype().map_err(|e| corrupt(path, e))? {
        ColorType::RGB(8) => 3,
        ColorType::RGBA(8) => 4,
        other => {
            return Err(Error::UnsupportedBands(format!(
                "{}: {other:?}, expected 8-bit RGB or RGBA",
                path.display()
            )))
        }
    };

    let geotransform = read_geotransform(&mut dec, path)?;
    let crs_id = read_crs(&mut dec);
    let nodata = dec
        .find_tag(Tag::Unknown(GDAL_NODATA))
        .ok()
        .flatten()
        .and_then(|v| v.into_string().ok())
        .and_then(|s| s.trim_matches(char::from(0)).trim().parse::<f64>().ok());

    let data = match dec.read_image().map_err(|e| corrupt(path, e))? {
        DecodingResult::U8(v) => v,
        _ => return Err(corrupt(path, "sample type is not 8-bit")),
    };
    if data.len() != width * height * bands {
        return Err(corrupt(
            path,
            format!("decoded {} samples for {width}x{height}x{bands}", data.len()),
        ));
    }
    let (rgb, mut mask) = if bands == 4 {
        split_alpha(&data)
    } else {
        (data, vec![false; width * height])
    };

    // Only integral values inside the 8-bit range can ever match a sample.
    if let Some(v) = nodata.filter(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)) {
        let v = v as u8;
        for (m, px) in mask.iter_mut().zip(rgb.chunks_exact(3)) {
            *m |= px.iter().all(|&c| c == v);
        }
    }

    Orthomosaic::new(width, height, rgb, mask, geotransform, crs_id)
}

fn read_geotransform(dec: &mut Decoder<File>, path: &Path) -> Result<GeoTransform> {
    let doubles = |dec: &mut Decoder<File>, tag: u16| -> Option<Vec<f64>> {
        dec.find_tag(Tag::Unknown(tag))
            .ok()
            .flatten()
            .and_then(|v| v.into_f64_vec().ok())
    };
    if let Some(m) = doubles(dec, MODEL_TRANSFORMATION) {
        if m.len() < 8 {
            return Err(corrupt(path, "short ModelTransformationTag"));
        }
        return Ok(GeoTransform::from_gdal([m[3], m[0], m[1], m[7], m[4], m[5]]));
    }
    match (doubles(dec, MODEL_PIXEL_SCALE), doubles(dec, MODEL_TIEPOINT)) {
        (Some(scale), Some(tie)) if scale.len() >= 2 && tie.len() >= 6 => {
            let (sx, sy) = (scale[0], scale[1]);
            Ok(GeoTransform::from_gdal([
                tie[3] - tie[0] * sx,
                sx,
                0.0,
                tie[4] + tie[1] * sy,
                0.0,
                -sy,
            ]))
        }
        _ => {
            log::warn!(
                "{}: no georeferencing tags, assuming identity geotransform",
                path.display()
            );
            Ok(GeoTransform::IDENTITY)
        }
    }
}

fn read_crs(dec: &mut Decoder<File>) -> String {
    let Some(keys) = dec
        .find_tag(Tag::Unknown(GEO_KEY_DIRECTORY))
        .ok()
        .flatten()
        .and_then(|v| v.into_u16_vec().ok())
    else {
        return String::new();
    };
    let lookup = |id: u16| {
        keys.get(4..)?
            .chunks_exact(4)
            .find(|e| e[0] == id && e[1] == 0)
            .map(|e| e[3])
    };
    lookup(PROJECTED_CS_TYPE_KEY)
        .or_else(|| lookup(GEOGRAPHIC_TYPE_KEY))
        .filter(|&code| code != 0 && code != 32767)
        .map(|code| format!("EPSG:{code}"))
        .unwrap_or_default()
}

fn tiff_err(e: tiff::TiffError) -> Error {
    Error::CorruptContainer(e.to_string())
}

/// Write an orthomosaic as a georeferenced 8-bit GeoTIFF.
///
/// With `nodata = Some(v)` the file is RGB and masked pixels carry `v` in every
/// band plus a GDAL nodata tag; otherwise it is RGBA with alpha 0 on masked pixels.
pub fn write_geotiff(ortho: &Orthomosaic, path: impl AsRef<Path>, nodata: Option<u8>) -> Result<()> {
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = TiffEncoder::new(file).map_err(tiff_err)?;
    let (w, h) = (ortho.width() as u32, ortho.height() as u32);
    let gt = ortho.geotransform;

    macro_rules! tag_and_write {
        ($img:expr, $data:expr) => {{
            let mut img = $img;
            let dir = img.encoder();
            if gt.row_rot == 0.0 && gt.col_rot == 0.0 {
                dir.write_tag(
                    Tag::Unknown(MODEL_PIXEL_SCALE),
                    &[gt.pixel_width, -gt.pixel_height, 0.0][..],
                )
                .map_err(tiff_err)?;
                dir.write_tag(
                    Tag::Unknown(MODEL_TIEPOINT),
                    &[0.0, 0.0, 0.0, gt.origin_x, gt.origin_y, 0.0][..],
                )
                .map_err(tiff_err)?;
            } else {
                let m = [
                    gt.pixel_width, gt.row_rot, 0.0, gt.origin_x,
                    gt.col_rot, gt.pixel_height, 0.0, gt.origin_y,
                    0.0, 0.0, 0.0, 0.0,
                    0.0, 0.0, 0.0, 1.0,
                ];
                dir.write_tag(Tag::Unknown(MODEL_TRANSFORMATION), &m[..])
                    .map_err(tiff_err)?;
            }
            if let Some(keys) = geo_keys(&ortho.crs_id) {
                dir.write_tag(Tag::Unknown(GEO_KEY_DIRECTORY), &keys[..])
                    .map_err(tiff_err)?;
            }
            if let Some(v) = nodata {
                dir.write_tag(Tag::Unknown(GDAL_NODATA), v.to_string().as_str())
                    .map_err(tiff_err)?;
            }
            img.write_data($data).map_err(tiff_err)?;
        }};
    }

    match nodata {
        Some(v) => {
            let mut rgb = ortho.rgb_bytes().to_vec();
            for (px, &m) in rgb.chunks_exact_mut(3).zip(ortho.mask()) {
                if m {
                    px.fill(v);
                }
            }
            tag_and_write!(enc.new_image::<colortype::RGB8>(w, h).map_err(tiff_err)?, &rgb);
        }
        None => {
            let rgba = to_rgba(ortho);
            tag_and_write!(enc.new_image::<colortype::RGBA8>(w, h).map_err(tiff_err)?, &rgba);
        }
    }
    Ok(())
}

fn geo_keys(crs_id: &str) -> Option<Vec<u16>> {
    let code: u16 = crs_id.strip_prefix("EPSG:")?.parse().ok()?;
    let geographic = (4000..5000).contains(&code);
    let (model, key) = if geographic {
        (2, GEOGRAPHIC_TYPE_KEY)
    } else {
        (1, PROJECTED_CS_TYPE_KEY)
    };
    Some(vec![
        1, 1, 0, 3,
        GT_MODEL_TYPE_KEY, 0, 1, model,
        GT_RASTER_TYPE_KEY, 0, 1, 1,
        key, 0, 1, code,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::load_orthomosaic;

    fn sample(mask: Vec<bool>, gt: GeoTransform) -> Orthomosaic {
        let (w, h) = (30, 20);
        let rgb = (0..w * h * 3).map(|i| (i % 251) as u8 + 1).collect();
        Orthomosaic::new(w, h, rgb, mask, gt, "EPSG:32717").unwrap()
    }

    #[test]
    fn opaque_rgba_roundtrip_has_empty_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tif");
        let gt = GeoTransform::from_gdal([500000.0, 0.05, 0.0, 9800000.0, 0.0, -0.05]);
        let o = sample(vec![false; 600], gt);
        write_geotiff(&o, &p, None).unwrap();
        let back = load_orthomosaic(&p).unwrap();
        assert_eq!((back.width(), back.height()), (30, 20));
        assert!(back.mask().iter().all(|m| !m));
        assert_eq!(back.rgb_bytes(), o.rgb_bytes());
        assert_eq!(back.geotransform, gt);
        assert_eq!(back.crs_id, "EPSG:32717");
    }

    #[test]
    fn alpha_zero_region_becomes_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.tif");
        let mask: Vec<bool> = (0..600).map(|i| (i % 30) < 7 && i / 30 > 12).collect();
        let o = sample(mask.clone(), GeoTransform::IDENTITY);
        write_geotiff(&o, &p, None).unwrap();
        assert_eq!(load_orthomosaic(&p).unwrap().mask(), &mask[..]);
    }

    #[test]
    fn nodata_value_becomes_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tif");
        let mask: Vec<bool> = (0..600).map(|i| i % 17 == 0).collect();
        let o = sample(mask.clone(), GeoTransform::IDENTITY);
        write_geotiff(&o, &p, Some(0)).unwrap();
        assert_eq!(load_orthomosaic(&p).unwrap().mask(), &mask[..]);
    }

    #[test]
    fn rotated_transform_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tif");
        let gt = GeoTransform::from_gdal([100.0, 0.5, 0.1, 200.0, 0.2, -0.5]);
        write_geotiff(&sample(vec![false; 600], gt), &p, None).unwrap();
        assert_eq!(load_orthomosaic(&p).unwrap().geotransform, gt);
    }

    #[test]
    fn grayscale_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tif");
        let mut enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
        enc.write_image::<colortype::Gray8>(4, 4, &[0u8; 16]).unwrap();
        assert!(matches!(load_orthomosaic(&p), Err(Error::UnsupportedBands(_))));
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tif");
        std::fs::write(&p, b"II*\0garbage").unwrap();
        assert!(matches!(load_orthomosaic(&p), Err(Error::CorruptContainer(_))));
        std::fs::write(&p, b"hello world").unwrap();
        assert!(matches!(load_orthomosaic(&p), Err(Error::CorruptContainer(_))));
    }
}
