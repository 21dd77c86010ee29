//! Append-only JSON-lines usage log.
//!
//! Each event is written with a single `write_all` of the line plus its
//! newline, so a crash can leave at most one unterminated final line. On
//! open, such a tail is moved to `<log>.quarantine` and cut from the log.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use reservoirchat_core::query_engine::Mode;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    /// UTC, RFC 3339.
    pub timestamp: String,
    pub session_id: String,
    pub mode: Mode,
    pub question: String,
    pub answer: String,
    pub latency_ms: u64,
    pub trace_ids: Vec<String>,
}

pub struct UsageLog {
    path: PathBuf,
    file: Mutex<File>,
}

pub fn quarantine_path(log: &Path) -> PathBuf {
    let mut name = OsString::from(log.as_os_str());
    name.push(".quarantine");
    PathBuf::from(name)
}

impl UsageLog {
    /// Opens (creating if needed) the log, quarantining a truncated last line.
    /// Returns the quarantined fragment, if any.
    pub fn open(path: &Path) -> std::io::Result<(Self, Option<String>)> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let quarantined = recover(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, quarantined))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &UsageEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_string(event).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut file = self.file.lock();
        file.write_all(line.as_bytes())?;
        file.flush()
    }

    pub fn read_all(path: &Path) -> std::io::Result<Vec<UsageEvent>> {
        let file = File::open(path)?;
        std::io::BufReader::new(file)
            .lines()
            .map(|line| serde_json::from_str(&line?).map_err(std::io::Error::other))
            .collect()
    }
}

fn recover(path: &Path) -> std::io::Result<Option<String>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep == bytes.len() {
        return Ok(None);
    }
    let fragment = String::from_utf8_lossy(&bytes[keep..]).into_owned();
    let mut q = OpenOptions::new().create(true).append(true).open(quarantine_path(path))?;
    q.write_all(fragment.as_bytes())?;
    q.write_all(b"\n")?;
    q.sync_all()?;
    let log = OpenOptions::new().write(true).open(path)?;
    log.set_len(keep as u64)?;
    log.sync_all()?;
    tracing::warn!(log = %path.display(), bytes = bytes.len() - keep, "quarantined truncated usage log line");
    Ok(Some(fragment))
}
