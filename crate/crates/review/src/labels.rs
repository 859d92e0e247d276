//! Append-only JSON-lines log of triage decisions.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use palmscan::dataset::Label;
use palmscan::scan::CandidateStatus;
use serde::{Deserialize, Serialize};

use crate::{Result, ReviewError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AcceptedPalm,
    RejectedNonpalm,
}

impl Decision {
    pub fn label(self) -> Label {
        match self {
            Decision::AcceptedPalm => Label::Palm,
            Decision::RejectedNonpalm => Label::NonPalm,
        }
    }

    pub fn status(self) -> CandidateStatus {
        match self {
            Decision::AcceptedPalm => CandidateStatus::AcceptedPalm,
            Decision::RejectedNonpalm => CandidateStatus::RejectedNonpalm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub id: String,
    pub decision: Decision,
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
}

impl LogRecord {
    pub fn now(id: impl Into<String>, decision: Decision) -> Self {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        LogRecord {
            id: id.into(),
            decision,
            ts,
        }
    }
}

/// Open handle on a labels log. Every append is flushed before it returns.
#[derive(Debug)]
pub struct LabelLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LabelLog {
    /// Open (creating if absent) and replay the log.
    ///
    /// A final record without its newline is what an interrupted append leaves
    /// behind; it is dropped and the file truncated to the last complete record.
    /// Malformed complete lines are an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<LogRecord>)> {
        let path = path.as_ref().to_path_buf();
        let mut raw = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut raw)?;
        }
        let (records, valid) = parse(&raw)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if valid < raw.len() {
            log::warn!(
                "{}: dropping {} bytes of incomplete trailing record",
                path.display(),
                raw.len() - valid
            );
            file.set_len(valid as u64)?;
        }
        Ok((
            LabelLog {
                path,
                out: BufWriter::new(file),
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Complete records and the byte length they span.
fn parse(raw: &[u8]) -> Result<(Vec<LogRecord>, usize)> {
    let mut records = Vec::new();
    let mut pos = 0;
    for (n, chunk) in raw.split_inclusive(|&b| b == b'\n').enumerate() {
        if chunk.last() != Some(&b'\n') {
            break;
        }
        let body = &chunk[..chunk.len() - 1];
        if !body.iter().all(u8::is_ascii_whitespace) {
            let rec = serde_json::from_slice(body).map_err(|e| ReviewError::CorruptLog {
                line: n + 1,
                detail: e.to_string(),
            })?;
            records.push(rec);
        }
        pos += chunk.len();
    }
    Ok((records, pos))
}
