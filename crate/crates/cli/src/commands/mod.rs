mod pipeline;
mod scanning;
mod triage;

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde_json::Value;

use crate::args::Command;
use crate::config::{FileConfig, Layered, RunRecord};

pub struct Ctx {
    pub config_file: Option<PathBuf>,
    pub workers: usize,
}

impl Ctx {
    fn record(&self, command: &str, config: &impl serde::Serialize) -> Result<RunRecord> {
        RunRecord::new(command, self.config_file.clone(), self.workers, config)
    }
}

pub fn dispatch(ctx: &Ctx, command: Command, file: FileConfig) -> Result<()> {
    match command {
        Command::Synth(a) => pipeline::synth(ctx, a.layer(file.synth)),
        Command::Extract(a) => pipeline::extract(ctx, a.layer(file.extract)),
        Command::Embed(a) => pipeline::embed(ctx, a.layer(file.embed)),
        Command::Train(a) => pipeline::train(ctx, a.layer(file.train)),
        Command::Evaluate(a) => pipeline::evaluate(ctx, a.layer(file.evaluate)),
        Command::ReferenceBackbone(a) => pipeline::reference_backbone(ctx, a.layer(file.reference_backbone)),
        Command::Scan(a) => scanning::scan(ctx, a.layer(file.scan)),
        Command::Candidates(a) => scanning::candidates(ctx, a.layer(file.candidates)),
        Command::Review(a) => triage::review(ctx, a.layer(file.review)),
        Command::ExportCoarse(a) => triage::export_coarse(ctx, a.layer(file.export_coarse)),
    }
}

/// One JSON line on stdout summarizing a successful command.
fn report(command: &str, mut summary: Value) {
    if let Value::Object(m) = &mut summary {
        m.insert("status".into(), "ok".into());
        m.insert("command".into(), command.into());
    }
    println!("{summary}");
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}
