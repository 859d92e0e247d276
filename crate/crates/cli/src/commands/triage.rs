use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use palmscan::raster::load_orthomosaic;
use palmscan::scan::CandidateWindow;
use palmscan_review::{router, serve, TriageSession};
use serde_json::json;

use super::{report, sibling, Ctx};
use crate::args::{ExportArgs, ReviewArgs};
use crate::config::require;

fn open_session(ortho: &Path, candidates: &Path, log: &Path) -> Result<TriageSession> {
    let ortho = Arc::new(load_orthomosaic(ortho)?);
    let list: Vec<CandidateWindow> = serde_json::from_slice(
        &fs::read(candidates).with_context(|| format!("reading {}", candidates.display()))?,
    )?;
    Ok(TriageSession::open(ortho, list, log)?)
}

pub fn review(ctx: &Ctx, mut a: ReviewArgs) -> Result<()> {
    let ortho = require(&a.ortho, "ortho")?;
    let candidates = require(&a.candidates, "candidates")?;
    let log = a.log.get_or_insert_with(|| sibling(&candidates, "labels.jsonl")).clone();
    let export_dir = a.export_dir.get_or_insert_with(|| sibling(&candidates, "coarse")).clone();
    let host = a.host.get_or_insert_with(|| "127.0.0.1".into()).clone();
    let port = *a.port.get_or_insert(8080);

    let session = open_session(&ortho, &candidates, &log)?;
    let (total, pending) = (session.len(), session.pending());
    let mut rec = ctx.record("review", &a)?;
    rec.input(&ortho)?;
    rec.input(&candidates)?;
    rec.write(&export_dir)?;

    let app = router(session, export_dir, a.ui.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("port {port} on {host} is unavailable"))?;
        let addr = listener.local_addr()?;
        eprintln!("serving {total} candidates ({pending} pending) on http://{addr}");
        serve(listener, app).await?;
        anyhow::Ok(())
    })?;
    report("review", json!({ "log": log }));
    Ok(())
}

pub fn export_coarse(ctx: &Ctx, mut a: ExportArgs) -> Result<()> {
    let ortho = require(&a.ortho, "ortho")?;
    let candidates = require(&a.candidates, "candidates")?;
    let out = require(&a.out, "out")?;
    let log = a.log.get_or_insert_with(|| sibling(&candidates, "labels.jsonl")).clone();
    let session = open_session(&ortho, &candidates, &log)?;
    let summary = session.export_to(&out)?;

    let mut rec = ctx.record("export-coarse", &a)?;
    rec.input(&ortho)?;
    rec.input(&candidates)?;
    rec.input(&log)?;
    rec.output(&out)?;
    rec.write(&out)?;
    report("export-coarse", serde_json::to_value(&summary)?);
    Ok(())
}
