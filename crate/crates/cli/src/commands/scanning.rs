use std::fs;

use anyhow::{bail, Result};
use palmscan::backbone::Backbone;
use palmscan::mlp::MlpHead;
use palmscan::raster::load_orthomosaic;
use palmscan::scan::{self, find_candidates, load_grid, overlay, render_heatmap, save_grid, Classifier, ScanConfig};
use serde_json::json;

use super::pipeline::{ModelInfo, MODEL_INFO};
use super::{report, sibling, Ctx};
use crate::args::{CandidatesArgs, ScanArgs};
use crate::config::{require, resolve_backbone};

pub fn scan(ctx: &Ctx, mut a: ScanArgs) -> Result<()> {
    let ortho_path = require(&a.ortho, "ortho")?;
    let head_path = require(&a.head, "head")?;
    let out = require(&a.out, "out")?;
    let backbone_path = resolve_backbone(&mut a.backbone)?;
    let mut config = ScanConfig::new(*a.patch.get_or_insert(40), *a.stride.get_or_insert(10));
    config.missing_threshold = *a.missing_threshold.get_or_insert(config.missing_threshold);
    config.batch_size = *a.batch_size.get_or_insert(config.batch_size);
    config.blank_margin = *a.blank_margin.get_or_insert(0);
    config.workers = ctx.workers;
    let alpha = *a.alpha.get_or_insert(0.5);
    let threshold = *a.threshold.get_or_insert(0.0);

    let ortho = load_orthomosaic(&ortho_path)?;
    if ortho.width() < config.patch_size || ortho.height() < config.patch_size {
        bail!(palmscan::Error::InvalidInput(format!(
            "raster is {}x{}, smaller than the {} px patch",
            ortho.width(),
            ortho.height(),
            config.patch_size
        )));
    }
    let backbone = Backbone::load(&backbone_path)?;
    let info_path = sibling(&head_path, MODEL_INFO);
    if info_path.exists() {
        let info: ModelInfo = serde_json::from_slice(&fs::read(&info_path)?)?;
        if info.graph_hash != backbone.graph_hash() {
            bail!(
                "head was trained on embeddings from backbone {} but {} has hash {}",
                info.graph_hash,
                backbone_path.display(),
                backbone.graph_hash()
            );
        }
    }
    let head = MlpHead::load(&head_path)?;
    let classifier = Classifier::new(backbone, head)?;
    let (grid, stats) = scan::scan(&ortho, &classifier, &config)?;

    save_grid(&grid, &config, stats, &out)?;
    render_heatmap(&grid).save(out.join("heatmap.png"))?;
    overlay(&ortho, &grid, alpha, threshold)?.save(out.join("overlay.png"))?;

    let mut rec = ctx.record("scan", &a)?;
    rec.config["scan_config"] = serde_json::to_value(&config)?;
    rec.input(&ortho_path)?;
    rec.input(&head_path)?;
    rec.input(&backbone_path)?;
    for f in ["grid.bin", "grid.json", "heatmap.png", "overlay.png"] {
        rec.output(&out.join(f))?;
    }
    rec.write(&out)?;
    report(
        "scan",
        json!({
            "out": out,
            "windows": stats.windows,
            "scored": stats.scored,
            "skipped_masked": stats.skipped_masked,
            "covered_pixels": grid.covered_pixels(),
        }),
    );
    Ok(())
}

pub fn candidates(ctx: &Ctx, mut a: CandidatesArgs) -> Result<()> {
    let grid_path = require(&a.grid, "grid")?;
    let out = require(&a.out, "out")?;
    let threshold = *a.threshold.get_or_insert(0.5);
    let min_distance = *a.min_distance.get_or_insert(50.0);

    let grid = load_grid(&grid_path)?;
    let found = find_candidates(&grid, threshold, min_distance)?;
    fs::create_dir_all(&out)?;
    let path = out.join("candidates.json");
    fs::write(&path, serde_json::to_vec_pretty(&found)?)?;

    let mut rec = ctx.record("candidates", &a)?;
    rec.input(&grid_path)?;
    rec.output(&path)?;
    rec.write(&out)?;
    report("candidates", json!({ "out": path, "count": found.len() }));
    Ok(())
}
