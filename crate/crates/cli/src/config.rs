//! Layering of command-line flags over an optional TOML file, and the
//! `run.json` record written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{
    CandidatesArgs, EmbedArgs, EvaluateArgs, ExportArgs, ExtractArgs, ReferenceArgs, ReviewArgs, ScanArgs,
    SynthArgs, TrainArgs,
};

/// Directory searched for a default backbone and `palmscan.toml`.
pub const HOME_ENV: &str = "PALMSCAN_HOME";
const CONFIG_FILE: &str = "palmscan.toml";
const BACKBONE_NAMES: [&str; 3] = ["backbone.onnx", "resnet18.onnx", "reference_cnn.onnx"];

/// Combine two sets of optional settings; `self` wins where both are set.
pub trait Layered: Sized {
    fn layer(self, under: Self) -> Self;
}

macro_rules! layered {
    ($($ty:ident { $($f:ident),* $(,)? })*) => {$(
        impl Layered for $ty {
            fn layer(self, under: Self) -> Self {
                $ty { $($f: self.$f.or(under.$f)),* }
            }
        }
    )*};
}

layered! {
    SynthArgs { out, width, height, palms, distractors, seed, masked_border, points_per_palm, points_per_other, jitter }
    ExtractArgs { ortho, points, out, scale, background, exclusion_radius, seed }
    EmbedArgs { patches, out, backbone, views, batch_size, test_fraction, seed }
    TrainArgs { embeddings, out, scale, nnodes, epochs, batch_size, learning_rate, optimizer, folds, seed, adapter, augment }
    ScanArgs { ortho, head, backbone, out, patch, stride, missing_threshold, batch_size, blank_margin, alpha, threshold }
    CandidatesArgs { grid, out, threshold, min_distance }
    ReviewArgs { ortho, candidates, log, export_dir, ui, host, port }
    ExportArgs { ortho, candidates, log, out }
    EvaluateArgs { embeddings, head, out, scale }
    ReferenceArgs { out, seed }
}

/// Contents of a TOML config file: one table per subcommand plus globals.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub synth: SynthArgs,
    pub extract: ExtractArgs,
    pub embed: EmbedArgs,
    pub train: TrainArgs,
    pub scan: ScanArgs,
    pub candidates: CandidatesArgs,
    pub review: ReviewArgs,
    #[serde(rename = "export-coarse")]
    pub export_coarse: ExportArgs,
    pub evaluate: EvaluateArgs,
    #[serde(rename = "reference-backbone")]
    pub reference_backbone: ReferenceArgs,
}

impl FileConfig {
    /// The explicit file, else `$PALMSCAN_HOME/palmscan.toml` when present, else empty.
    pub fn load(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => home().map(|h| h.join(CONFIG_FILE)).filter(|p| p.exists()),
        };
        let Some(path) = path else {
            return Ok((FileConfig::default(), None));
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok((cfg, Some(path)))
    }
}

fn home() -> Option<PathBuf> {
    std::env::var_os(HOME_ENV).map(PathBuf::from)
}

/// `--backbone`, else the first known model file in `$PALMSCAN_HOME`.
pub fn resolve_backbone(flag: &mut Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    let home = home().with_context(|| format!("no --backbone given and {HOME_ENV} is not set"))?;
    let found = BACKBONE_NAMES
        .iter()
        .map(|n| home.join(n))
        .find(|p| p.exists())
        .with_context(|| format!("no backbone model ({}) in {}", BACKBONE_NAMES.join(", "), home.display()))?;
    *flag = Some(found.clone());
    Ok(found)
}

pub fn require<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().with_context(|| format!("missing required setting --{flag}"))
}

/// SHA-256 of a file, or of a directory as the digest over its sorted
/// `(relative path, file digest)` pairs.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(hex::encode(Sha256::digest(fs::read(path)?)));
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, digest) in entries {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != RUN_RECORD) {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, hex::encode(Sha256::digest(fs::read(&p)?))));
        }
    }
    Ok(())
}

pub const RUN_RECORD: &str = "run.json";

/// Effective configuration and artifact digests of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: &'static str,
    pub config_file: Option<PathBuf>,
    pub workers: usize,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, config_file: Option<PathBuf>, workers: usize, config: &impl Serialize) -> Result<Self> {
        Ok(RunRecord {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_file,
            workers,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_RECORD), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
