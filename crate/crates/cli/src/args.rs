//! Subcommand arguments. Every setting is optional at parse time so that it
//! can fall back to the config file; defaults are applied by each command.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "palmscan", version, about = "Palm canopy detection over orthomosaic imagery")]
pub struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for embedding and scanning (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic orthomosaic with planted palms and distractors.
    Synth(SynthArgs),
    /// Cut labeled patches around survey points.
    Extract(ExtractArgs),
    /// Embed a patch set with the frozen backbone, split into train and test caches.
    Embed(EmbedArgs),
    /// Cross-validate the classification head, then refit on the whole training cache.
    Train(TrainArgs),
    /// Slide the classifier over an orthomosaic: probability grid, heatmap, overlay.
    Scan(ScanArgs),
    /// Propose 100×100 candidate windows from a probability grid.
    Candidates(CandidatesArgs),
    /// Serve the triage API (and UI bundle) for labeling candidates.
    Review(ReviewArgs),
    /// Write triage decisions as a coarse patch set without starting the server.
    ExportCoarse(ExportArgs),
    /// Score a held-out embedding cache and report classification metrics.
    Evaluate(EvaluateArgs),
    /// Write the small seeded reference CNN as an ONNX backbone.
    ReferenceBackbone(ReferenceArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Extract(_) => "extract",
            Command::Embed(_) => "embed",
            Command::Train(_) => "train",
            Command::Scan(_) => "scan",
            Command::Candidates(_) => "candidates",
            Command::Review(_) => "review",
            Command::ExportCoarse(_) => "export-coarse",
            Command::Evaluate(_) => "evaluate",
            Command::ReferenceBackbone(_) => "reference-backbone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleArg {
    Fine,
    Coarse,
}

impl From<ScaleArg> for palmscan::dataset::Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Fine => palmscan::dataset::Scale::Fine40,
            ScaleArg::Coarse => palmscan::dataset::Scale::Coarse100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory (ortho.png, truth.csv, points.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub palms: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Width of the nodata frame around the raster.
    #[arg(long)]
    pub masked_border: Option<usize>,
    /// Jittered survey points written per palm to points.csv.
    #[arg(long)]
    pub points_per_palm: Option<usize>,
    /// Jittered survey points written per distractor to points.csv.
    #[arg(long)]
    pub points_per_other: Option<usize>,
    /// Maximum jitter in pixels.
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ortho: Option<PathBuf>,
    /// Survey CSV with header id,x,y,label.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Output patch-set directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    /// Extra non-palm windows sampled away from palm points.
    #[arg(long)]
    pub background: Option<usize>,
    /// Minimum distance in pixels between sampled windows and palm points.
    #[arg(long)]
    pub exclusion_radius: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedArgs {
    /// Patch-set directory.
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Output directory; caches go to `train/` and `test/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ONNX backbone; defaults to a model in $PALMSCAN_HOME.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Augmented views cached per training patch.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction held out for testing; 0 embeds everything into `train/`.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Training embedding cache directory.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory (head.bin, history.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    #[arg(long)]
    pub nnodes: Option<usize>,
    /// Defaults to 500 for fine and 200 for coarse patches.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Insert a trainable D×D layer ahead of the head.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adapter: Option<bool>,
    /// Train on cached augmented views when present.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanArgs {
    #[arg(long)]
    pub ortho: Option<PathBuf>,
    /// Trained head (head.bin).
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window size in pixels.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Windows at or above this nodata fraction vote 0 without running the model.
    #[arg(long)]
    pub missing_threshold: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also skip windows with nodata within this many pixels of their border.
    #[arg(long)]
    pub blank_margin: Option<usize>,
    /// Heatmap opacity in the overlay.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Overlay only pixels at or above this probability.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidatesArgs {
    /// grid.bin written by `scan`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Output directory (candidates.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Minimum pixel distance between accepted peaks.
    #[arg(long)]
    pub min_distance: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewArgs {
    #[arg(long)]
    pub ortho: Option<PathBuf>,
    /// candidates.json written by `candidates`.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Labels log; defaults to labels.jsonl beside the candidates file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Where GET /api/export writes; defaults to coarse/ beside the candidates file.
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
    /// Built UI bundle to serve at /.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportArgs {
    #[arg(long)]
    pub ortho: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Held-out embedding cache directory.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Output directory (metrics.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale name echoed into the report.
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}
