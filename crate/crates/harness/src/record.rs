//! Append-only JSON-lines log of judged samples.
//!
//! One line per (task, strategy label, sample index). A torn final line
//! (from a crash mid-write) is dropped on open; a malformed line anywhere
//! else is an error.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use m2wf_core::strategy::StrategyKind;
use m2wf_core::task::SubsetLabel;
use m2wf_core::usage::TokenUsage;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::sandbox::Verdict;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Recalled examples found in the response.
    pub recalled: usize,
    /// Zero-based indices of the examples the model kept.
    pub selected: Vec<usize>,
    pub warnings: Vec<String>,
    pub refusal: bool,
    pub parse_failure: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub latency_ms: u64,
    pub judge_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub task_id: String,
    /// Configured strategy label.
    pub strategy: String,
    pub kind: StrategyKind,
    pub model: String,
    pub sample_index: u32,
    /// Fingerprint of the (first) prompt.
    pub fingerprint: String,
    /// Cache keys of the completions behind this sample.
    pub completion_refs: Vec<String>,
    pub trace: TraceSummary,
    pub verdict: Verdict,
    pub subset: Option<SubsetLabel>,
    pub timings: Timings,
    pub usage: TokenUsage,
}

impl RunRecord {
    pub fn key(&self) -> (String, String, u32) {
        (self.task_id.clone(), self.strategy.clone(), self.sample_index)
    }
}

/// Reads all complete rows. Returns the rows and the byte length of the
/// valid prefix.
pub fn read_records(path: &Path) -> Result<(Vec<RunRecord>, u64)> {
    let text = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let mut rows = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < text.len() {
        line_no += 1;
        let rest = &text[offset..];
        let (line, terminated) = match rest.iter().position(|b| *b == b'\n') {
            Some(end) => (&rest[..end], true),
            None => (rest, false),
        };
        // An unterminated tail is a torn write even when it parses.
        if !terminated {
            break;
        }
        if !line.iter().all(u8::is_ascii_whitespace) {
            let row = std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<RunRecord>(s).map_err(|e| e.to_string()))
                .map_err(|message| HarnessError::RecordLog { path: path.to_path_buf(), line: line_no, message })?;
            rows.push(row);
        }
        offset += line.len() + 1;
    }
    Ok((rows, offset as u64))
}

pub struct RecordLog {
    path: PathBuf,
    file: Mutex<File>,
    done: Mutex<BTreeSet<(String, String, u32)>>,
}

impl RecordLog {
    /// Opens (or creates) the log, trimming a torn tail so appends start on a
    /// line boundary. Returns the log and the rows already present.
    pub fn open(path: &Path) -> Result<(Self, Vec<RunRecord>)> {
        let (rows, valid_len) = read_records(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        file.set_len(valid_len).map_err(|e| HarnessError::io(path, e))?;
        let done = rows.iter().map(RunRecord::key).collect();
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file), done: Mutex::new(done) }, rows))
    }

    pub fn is_done(&self, task_id: &str, label: &str, sample_index: u32) -> bool {
        self.done.lock().expect("record set lock").contains(&(task_id.to_string(), label.to_string(), sample_index))
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        let mut file = self.file.lock().expect("record log lock");
        file.write_all(line.as_bytes()).and_then(|_| file.flush()).map_err(|e| HarnessError::io(&self.path, e))?;
        self.done.lock().expect("record set lock").insert(record.key());
        Ok(())
    }
}
