mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use palmscan_review::ReviewError;

use crate::args::Cli;
use crate::commands::Ctx;
use crate::config::FileConfig;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "command": command,
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (file, config_file) = FileConfig::load(cli.config.as_deref())?;
    let workers = cli.workers.or(file.workers).unwrap_or(0);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()?;
    }
    let ctx = Ctx { config_file, workers };
    commands::dispatch(&ctx, cli.command, file)
}

/// Short machine-readable category for the first library error in the chain.
fn error_kind(e: &anyhow::Error) -> &'static str {
    use palmscan::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::MissingFile(_) => "missing_file",
                E::UnsupportedBands(_) => "unsupported_bands",
                E::CorruptContainer(_) => "corrupt_container",
                E::OutOfBounds(_) => "out_of_bounds",
                E::NonInvertible => "non_invertible",
                E::InvalidInput(_) => "invalid_input",
                E::InsufficientArea { .. } => "insufficient_area",
                E::Signature(_) => "signature",
                E::Runtime(_) => "runtime",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::Version { .. } => "version",
                E::Checksum(_) => "checksum",
                E::Magic(_) => "magic",
                E::Io(_) => "io",
                E::Json(_) => "json",
                E::Csv(_) => "csv",
                E::Image(_) => "image",
            };
        }
        if let Some(err) = cause.downcast_ref::<ReviewError>() {
            return match err {
                ReviewError::UnknownCandidate(_) => "unknown_candidate",
                ReviewError::NoDecisions => "no_decisions",
                ReviewError::NoCandidates => "no_candidates",
                ReviewError::DuplicateCandidate(_) => "duplicate_candidate",
                ReviewError::CorruptLog { .. } => "corrupt_log",
                ReviewError::Core(_) => "core",
                ReviewError::Io(_) => "io",
                ReviewError::Json(_) => "json",
                ReviewError::Image(_) => "image",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}
