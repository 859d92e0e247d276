use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use palmscan::dataset::{save_patch_set, Label, LabeledPatch, PatchSet, Provenance, Scale};
use palmscan::raster::Orthomosaic;
use palmscan::scan::{CandidateStatus, CandidateWindow};
use serde::{Deserialize, Serialize};

use crate::labels::{Decision, LabelLog, LogRecord};
use crate::{Result, ReviewError};

/// A candidate as the API presents it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub candidate: CandidateWindow,
    pub patch_url: String,
}

impl From<&CandidateWindow> for CandidateView {
    fn from(c: &CandidateWindow) -> Self {
        CandidateView {
            candidate: c.clone(),
            patch_url: format!("/api/patch/{}.png", c.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub total: usize,
    pub palm: usize,
    pub nonpalm: usize,
}

/// Candidates over one orthomosaic plus the decisions made on them.
///
/// Candidates are held in descending score order (ties by id). The status of
/// each candidate is the latest logged decision for its id.
#[derive(Debug)]
pub struct TriageSession {
    ortho: Arc<Orthomosaic>,
    candidates: Vec<CandidateWindow>,
    index: HashMap<String, usize>,
    log: LabelLog,
}

impl TriageSession {
    /// Build a session and restore its state from `log_path` (created if absent).
    pub fn open(
        ortho: Arc<Orthomosaic>,
        mut candidates: Vec<CandidateWindow>,
        log_path: impl AsRef<Path>,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(ReviewError::NoCandidates);
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        let mut index = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter_mut().enumerate() {
            if !c.window.fits(ortho.width(), ortho.height()) {
                return Err(palmscan::Error::OutOfBounds(format!("candidate {} lies outside the raster", c.id)).into());
            }
            c.status = CandidateStatus::Pending;
            if index.insert(c.id.clone(), i).is_some() {
                return Err(ReviewError::DuplicateCandidate(c.id.clone()));
            }
        }
        let (log, records) = LabelLog::open(log_path)?;
        let mut session = TriageSession {
            ortho,
            candidates,
            index,
            log,
        };
        for (n, r) in records.iter().enumerate() {
            let i = session.position(&r.id).map_err(|_| ReviewError::CorruptLog {
                line: n + 1,
                detail: format!("candidate {:?} is not part of this session", r.id),
            })?;
            session.candidates[i].status = r.decision.status();
        }
        Ok(session)
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| ReviewError::UnknownCandidate(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    pub fn candidates(&self) -> &[CandidateWindow] {
        &self.candidates
    }

    pub fn page(&self, offset: usize, limit: usize) -> &[CandidateWindow] {
        let start = offset.min(self.candidates.len());
        let end = start.saturating_add(limit).min(self.candidates.len());
        &self.candidates[start..end]
    }

    pub fn get(&self, id: &str) -> Result<&CandidateWindow> {
        Ok(&self.candidates[self.position(id)?])
    }

    pub fn pending(&self) -> usize {
        self.candidates
            .iter()
            .filter(|c| c.status == CandidateStatus::Pending)
            .count()
    }

    /// The 100×100 crop under a candidate, PNG encoded. Nodata pixels are black.
    pub fn patch_png(&self, id: &str) -> Result<Vec<u8>> {
        let c = self.get(id)?;
        let patch = self.ortho.extract_patch(&c.window)?;
        let n = patch.size() as u32;
        let img = image::RgbImage::from_raw(n, n, patch.pixels).expect("patch buffer is size*size*3");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Record a decision. Repeating the current decision is a no-op; a
    /// different one is appended and replaces it.
    pub fn record(&mut self, id: &str, decision: Decision) -> Result<&CandidateWindow> {
        let i = self.position(id)?;
        if self.candidates[i].status != decision.status() {
            self.log.append(&LogRecord::now(id, decision))?;
            self.candidates[i].status = decision.status();
        }
        Ok(&self.candidates[i])
    }

    /// Decided candidates as a coarse patch set, in session order.
    pub fn export(&self) -> Result<PatchSet> {
        let items = self
            .candidates
            .iter()
            .filter_map(|c| {
                let label = match c.status {
                    CandidateStatus::Pending => return None,
                    CandidateStatus::AcceptedPalm => Label::Palm,
                    CandidateStatus::RejectedNonpalm => Label::NonPalm,
                };
                Some(self.ortho.extract_patch(&c.window).map(|patch| LabeledPatch {
                    id: c.id.clone(),
                    label,
                    scale: Scale::Coarse100,
                    provenance: Provenance::Triage,
                    patch,
                }))
            })
            .collect::<palmscan::Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(ReviewError::NoDecisions);
        }
        Ok(PatchSet::new(Scale::Coarse100, items)?)
    }

    /// Export into `dir` in the patch-set directory format.
    pub fn export_to(&self, dir: impl AsRef<Path>) -> Result<ExportSummary> {
        let set = self.export()?;
        save_patch_set(&set, dir.as_ref())?;
        Ok(ExportSummary {
            dir: dir.as_ref().to_path_buf(),
            total: set.len(),
            palm: set.count(Label::Palm),
            nonpalm: set.count(Label::NonPalm),
        })
    }
}
