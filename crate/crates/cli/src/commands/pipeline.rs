use std::fs;

use anyhow::{bail, ensure, Context, Result};
use palmscan::backbone::reference::write_reference_backbone;
use palmscan::backbone::{Backbone, EmbeddingCache};
use palmscan::dataset::{
    extract_points, load_patch_set, read_survey_csv, sample_nonpalm, save_patch_set, train_test_split,
    write_survey_csv, AugmentationConfig, Label, Provenance, Scale,
};
use palmscan::metrics::MetricsReport;
use palmscan::mlp::{self, FeatureSet, MlpHead, OptimizerKind, TrainConfig};
use palmscan::raster::load_orthomosaic;
use palmscan::synth::{generate, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{report, Ctx};
use crate::args::{EmbedArgs, EvaluateArgs, ExtractArgs, OptimizerArg, ReferenceArgs, ScaleArg, SynthArgs, TrainArgs};
use crate::config::{require, resolve_backbone};

/// Written next to `head.bin`: what the head was trained on.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub graph_hash: String,
    pub dim: usize,
    pub nnodes: usize,
    pub scale: Scale,
}

pub const MODEL_INFO: &str = "model.json";

pub fn synth(ctx: &Ctx, mut a: SynthArgs) -> Result<()> {
    let out = require(&a.out, "out")?;
    let d = SynthConfig::default();
    let config = SynthConfig {
        width: *a.width.get_or_insert(d.width),
        height: *a.height.get_or_insert(d.height),
        n_palms: *a.palms.get_or_insert(d.n_palms),
        n_distractors: *a.distractors.get_or_insert(d.n_distractors),
        masked_border: *a.masked_border.get_or_insert(d.masked_border),
        seed: *a.seed.get_or_insert(d.seed),
        ..d
    };
    let per_palm = *a.points_per_palm.get_or_insert(12);
    let per_other = *a.points_per_other.get_or_insert(6);
    let jitter = *a.jitter.get_or_insert(4.0);

    let scene = generate(&config)?;
    scene.write(&out)?;
    let mut points = scene.jittered_points(Label::Palm, per_palm, jitter, config.seed ^ 1);
    points.extend(scene.jittered_points(Label::NonPalm, per_other, jitter, config.seed ^ 2));
    write_survey_csv(out.join("points.csv"), &points)?;

    let mut rec = ctx.record("synth", &a)?;
    for f in ["ortho.png", "truth.csv", "points.csv"] {
        rec.output(&out.join(f))?;
    }
    rec.write(&out)?;
    report(
        "synth",
        json!({ "out": out, "palms": scene.palms.len(), "distractors": scene.distractors.len(), "points": points.len() }),
    );
    Ok(())
}

pub fn extract(ctx: &Ctx, mut a: ExtractArgs) -> Result<()> {
    let ortho_path = require(&a.ortho, "ortho")?;
    let points_path = require(&a.points, "points")?;
    let out = require(&a.out, "out")?;
    let scale: Scale = (*a.scale.get_or_insert(ScaleArg::Fine)).into();
    let background = *a.background.get_or_insert(0);
    let radius = *a.exclusion_radius.get_or_insert(30.0);
    let seed = *a.seed.get_or_insert(3);

    let ortho = load_orthomosaic(&ortho_path)?;
    let points = read_survey_csv(&points_path)?;
    let (mut set, skipped) = extract_points(&ortho, &points, scale, Provenance::Survey)?;
    for s in &skipped {
        log::warn!("skipped point {}: {}", s.id, s.reason);
    }
    if background > 0 {
        let palms: Vec<(f64, f64)> = points.iter().filter(|p| p.label == Label::Palm).map(|p| (p.x, p.y)).collect();
        set = set.merge(sample_nonpalm(&ortho, &palms, background, radius, scale, seed)?)?;
    }
    ensure!(!set.is_empty(), "no patches could be extracted");
    save_patch_set(&set, &out)?;
    fs::write(out.join("skipped.json"), serde_json::to_vec_pretty(&skipped)?)?;

    let mut rec = ctx.record("extract", &a)?;
    rec.input(&ortho_path)?;
    rec.input(&points_path)?;
    rec.output(&out)?;
    rec.write(&out)?;
    report(
        "extract",
        json!({
            "out": out,
            "palm": set.count(Label::Palm),
            "nonpalm": set.count(Label::NonPalm),
            "skipped": skipped.len(),
        }),
    );
    Ok(())
}

pub fn embed(ctx: &Ctx, mut a: EmbedArgs) -> Result<()> {
    let patches = require(&a.patches, "patches")?;
    let out = require(&a.out, "out")?;
    let backbone_path = resolve_backbone(&mut a.backbone)?;
    let views = *a.views.get_or_insert(2);
    let batch = *a.batch_size.get_or_insert(32);
    let test_fraction = *a.test_fraction.get_or_insert(0.2);
    let seed = *a.seed.get_or_insert(5);
    ensure!((0.0..1.0).contains(&test_fraction), "--test-fraction must be in [0, 1)");

    let set = load_patch_set(&patches)?;
    let backbone = Backbone::load(&backbone_path)?;
    let aug = AugmentationConfig::default();
    let (train, test) = if test_fraction > 0.0 {
        let (tr, te) = train_test_split(&set, 1.0 - test_fraction, seed)?;
        (tr, Some(te))
    } else {
        (set, None)
    };
    let train_cache = EmbeddingCache::build(&backbone, &train, views, &aug, batch)?;
    train_cache.save(out.join("train"))?;
    let mut summary = json!({ "out": out, "dim": backbone.out_dim(), "train": train.len(), "views": views });
    if let Some(test) = &test {
        EmbeddingCache::build(&backbone, test, 0, &aug, batch)?.save(out.join("test"))?;
        summary["test"] = test.len().into();
    }

    let mut rec = ctx.record("embed", &a)?;
    rec.input(&patches)?;
    rec.input(&backbone_path)?;
    rec.output(&out)?;
    rec.write(&out)?;
    report("embed", summary);
    Ok(())
}

pub fn train(ctx: &Ctx, mut a: TrainArgs) -> Result<()> {
    let emb = require(&a.embeddings, "embeddings")?;
    let out = require(&a.out, "out")?;
    let scale: Scale = (*a.scale.get_or_insert(ScaleArg::Fine)).into();
    let nnodes = *a.nnodes.get_or_insert(256);
    let folds = *a.folds.get_or_insert(5);
    let mut config = TrainConfig::for_scale(scale, nnodes);
    config.epochs = *a.epochs.get_or_insert(config.epochs);
    config.batch_size = *a.batch_size.get_or_insert(config.batch_size);
    config.learning_rate = *a.learning_rate.get_or_insert(config.learning_rate);
    config.seed = *a.seed.get_or_insert(config.seed);
    config.adapter = *a.adapter.get_or_insert(config.adapter);
    config.augment = *a.augment.get_or_insert(config.augment);
    config.optimizer = match a.optimizer.get_or_insert(OptimizerArg::Adam) {
        OptimizerArg::Adam => OptimizerKind::default(),
        OptimizerArg::Sgd => OptimizerKind::sgd(),
    };

    let cache = EmbeddingCache::load(&emb, None)?;
    let data = FeatureSet::from_cache(&cache)?;
    let (head, history) = mlp::train(&data, folds, &config)?;

    fs::create_dir_all(&out)?;
    head.save(out.join("head.bin"))?;
    fs::write(out.join("history.json"), serde_json::to_vec_pretty(&history)?)?;
    let info = ModelInfo {
        graph_hash: cache.graph_hash.clone(),
        dim: head.dim(),
        nnodes,
        scale,
    };
    fs::write(out.join(MODEL_INFO), serde_json::to_vec_pretty(&info)?)?;

    let mut rec = ctx.record("train", &a)?;
    rec.config["train_config"] = serde_json::to_value(&config)?;
    rec.input(&emb)?;
    for f in ["head.bin", "history.json", MODEL_INFO] {
        rec.output(&out.join(f))?;
    }
    rec.write(&out)?;
    report(
        "train",
        json!({
            "out": out,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "selected_fold": history.selected_fold,
            "selected_epoch": history.selected_epoch,
            "selected_val_loss": history.selected_val_loss,
        }),
    );
    Ok(())
}

pub fn evaluate(ctx: &Ctx, mut a: EvaluateArgs) -> Result<()> {
    let emb = require(&a.embeddings, "embeddings")?;
    let head_path = require(&a.head, "head")?;
    let out = require(&a.out, "out")?;
    let head = MlpHead::load(&head_path)?;
    let cache = EmbeddingCache::load(&emb, None)?;
    ensure!(
        cache.dim == head.dim(),
        "embeddings have {} features but the head expects {}",
        cache.dim,
        head.dim()
    );
    let scale = *a.scale.get_or_insert(ScaleArg::Fine);
    let data = FeatureSet::from_cache(&cache)?;
    let scores = head.predict_proba_batch(data.raw())?;
    let labels: Vec<u8> = data.labels().iter().map(|l| l.positive()).collect();
    let name = match scale {
        ScaleArg::Fine => "fine",
        ScaleArg::Coarse => "coarse",
    };
    let report_ = MetricsReport::from_scores(name, head.nnodes(), &labels, &scores)
        .context("computing metrics (the cache needs both classes)")?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&report_)?)?;
    eprintln!("{}\n{}", MetricsReport::header(), report_.row());

    let mut rec = ctx.record("evaluate", &a)?;
    rec.input(&emb)?;
    rec.input(&head_path)?;
    rec.output(&out.join("metrics.json"))?;
    rec.write(&out)?;
    report("evaluate", serde_json::to_value(&report_)?);
    Ok(())
}

pub fn reference_backbone(ctx: &Ctx, mut a: ReferenceArgs) -> Result<()> {
    let out = require(&a.out, "out")?;
    let seed = *a.seed.get_or_insert(17);
    let model = write_reference_backbone(&out, seed)?;
    let bb = Backbone::load(&model)?;
    if bb.out_dim() == 0 {
        bail!("reference backbone has no outputs");
    }
    let mut rec = ctx.record("reference-backbone", &a)?;
    rec.output(&model)?;
    rec.write(&out)?;
    report(
        "reference-backbone",
        json!({ "model": model, "dim": bb.out_dim(), "graph_hash": bb.graph_hash() }),
    );
    Ok(())
}
