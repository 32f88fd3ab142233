//! One JSON-lines file per session under a log directory. Every appended
//! line is flushed and synced before the append returns.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use scalewise_core::audit::{verify, AuditSink, ChainBreak, SinkError};
use scalewise_core::AuditEvent;

pub fn log_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}

pub struct JsonlSink {
    file: File,
    path: PathBuf,
}

impl JsonlSink {
    /// Creates a fresh log; refuses to reuse an existing file.
    pub fn create(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().write(true).create_new(true).open(&path)?;
        Ok(Self { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl AuditSink for JsonlSink {
    fn append(&mut self, _event: &AuditEvent, line: &str) -> Result<(), SinkError> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| SinkError(format!("{}: {e}", self.path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Line { line: u64, message: String },
}

/// Parses every line. Each must decode to an event and be byte-identical
/// to that event's canonical encoding.
pub fn read_log(path: &Path) -> Result<Vec<AuditEvent>, LogError> {
    let io = |source| LogError::Io { path: path.to_owned(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let event = AuditEvent::from_line(&line).map_err(|message| LogError::Line { line: i as u64, message })?;
        if event.to_line() != line {
            return Err(LogError::Line { line: i as u64, message: "line is not in canonical form".into() });
        }
        events.push(event);
    }
    Ok(events)
}

#[derive(Debug)]
pub enum VerifyFailure {
    Io(LogError),
    Broken(ChainBreak),
}

/// Verifies a log file: event count on success, otherwise the first broken
/// seq (a line that does not even parse counts as broken at its position).
pub fn verify_file(path: &Path) -> Result<usize, VerifyFailure> {
    let events = match read_log(path) {
        Ok(e) => e,
        Err(LogError::Line { line, message }) => return Err(VerifyFailure::Broken(ChainBreak { seq: line, reason: message })),
        Err(e) => return Err(VerifyFailure::Io(e)),
    };
    verify(&events).map_err(VerifyFailure::Broken)?;
    Ok(events.len())
}
