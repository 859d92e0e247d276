//! Triage service: candidate windows proposed by a scan are shown to an
//! annotator, who accepts (palm) or rejects (non-palm) each one. Decisions go
//! to an append-only JSON-lines log and can be exported as a coarse patch set.

pub mod labels;
pub mod server;
pub mod session;

pub use labels::{Decision, LabelLog, LogRecord};
pub use server::{router, serve};
pub use session::{CandidateView, ExportSummary, TriageSession};

use thiserror::Error;

pub type Result<T, E = ReviewError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),

    #[error("no decisions recorded yet")]
    NoDecisions,

    #[error("session has no candidates")]
    NoCandidates,

    #[error("duplicate candidate id {0:?}")]
    DuplicateCandidate(String),

    #[error("labels log line {line}: {detail}")]
    CorruptLog { line: usize, detail: String },

    #[error(transparent)]
    Core(#[from] palmscan::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}
