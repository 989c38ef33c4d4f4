//! Append-only JSON-lines run log: one `{ts, kind, payload}` object per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: String,
    pub kind: String,
    pub payload: Value,
}

pub mod kinds {
    pub const RUN_STARTED: &str = "run_started";
    pub const TASK_DISPATCHED: &str = "task_dispatched";
    pub const TASK_FINISHED: &str = "task_finished";
    pub const ROUND_COMPLETED: &str = "round_completed";
    pub const FINAL_MODEL: &str = "final_model";
    pub const EVALUATION: &str = "evaluation";
    pub const RUN_FINISHED: &str = "run_finished";
    pub const RUN_ABORTED: &str = "run_aborted";
    pub const BASELINES: &str = "baselines";
}

/// Keeps every record in memory and, when backed by a file, appends and
/// flushes each one as it is written.
#[derive(Debug, Default)]
pub struct RunLog {
    file: Option<(PathBuf, File)>,
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh log at `path`, replacing any earlier one.
    pub fn create(path: &Path) -> Result<Self, OrchestratorError> {
        Self::open_with(path, false)
    }

    /// Opens `path` for appending, keeping existing records.
    pub fn append(path: &Path) -> Result<Self, OrchestratorError> {
        let records = if path.exists() { read_run_log(path)? } else { Vec::new() };
        let mut log = Self::open_with(path, true)?;
        log.records = records;
        Ok(log)
    }

    fn open_with(path: &Path, append: bool) -> Result<Self, OrchestratorError> {
        let io = |e: std::io::Error| OrchestratorError::Io(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            file: Some((path.to_path_buf(), file)),
            records: Vec::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn write(&mut self, kind: &str, payload: Value) -> Result<(), OrchestratorError> {
        let record = LogRecord {
            ts: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            kind: kind.to_string(),
            payload,
        };
        if let Some((path, file)) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("log records serialize");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>, OrchestratorError> {
    let file = File::open(path).map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| OrchestratorError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| OrchestratorError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}
