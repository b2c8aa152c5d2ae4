use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub request_tag: String,
    pub prompt_hash: String,
    /// Absent when the attempt failed.
    pub raw_text_hash: Option<String>,
    pub latency_ms: u64,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only record of every backend attempt, optionally mirrored to a
/// JSONL file.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
    sink: Option<(PathBuf, Mutex<File>)>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(AuditLog {
            entries: Mutex::new(Vec::new()),
            sink: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn record(&self, entry: AuditEntry) -> Result<()> {
        let mut entries = self.entries.lock().expect("audit lock");
        if let Some((path, file)) = &self.sink {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            file.lock()
                .expect("audit file lock")
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("audit lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_audit_file(path: &Path) -> Result<Vec<AuditEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
