//! Append-only event storage, one log per session.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::session::Event;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid session id {0:?}")]
    BadId(String),
}

pub trait EventStore: Send + Sync {
    fn append(&self, session_id: &str, event: &Event) -> Result<(), StoreError>;
    /// Every stored log, keyed by session id.
    fn load_all(&self) -> Result<BTreeMap<String, Vec<Event>>, StoreError>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    logs: Mutex<BTreeMap<String, Vec<Event>>>,
}

impl EventStore for MemoryStore {
    fn append(&self, session_id: &str, event: &Event) -> Result<(), StoreError> {
        self.logs
            .lock()
            .expect("store poisoned")
            .entry(session_id.to_string())
            .or_default()
            .push(event.clone());
        Ok(())
    }

    fn load_all(&self) -> Result<BTreeMap<String, Vec<Event>>, StoreError> {
        Ok(self.logs.lock().expect("store poisoned").clone())
    }
}

/// `<dir>/sessions/<id>.jsonl`, one event per line.
#[derive(Debug)]
pub struct JsonlStore {
    dir: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl JsonlStore {
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(JsonlStore { dir })
    }

    fn path(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::BadId(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.jsonl")))
    }
}

impl EventStore for JsonlStore {
    fn append(&self, session_id: &str, event: &Event) -> Result<(), StoreError> {
        let path = self.path(session_id)?;
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))
    }

    /// Unreadable lines (e.g. a write cut short by a crash) are skipped.
    fn load_all(&self) -> Result<BTreeMap<String, Vec<Event>>, StoreError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir).map_err(io(&self.dir))? {
            let path = entry.map_err(io(&self.dir))?.path();
            let Some(id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".jsonl"))
            else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            if !text.is_empty() && !text.ends_with('\n') {
                let mut f = OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
                f.write_all(b"\n").map_err(io(&path))?;
            }
            let mut events = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str::<Event>(line) {
                    Ok(e) => events.push(e),
                    Err(e) => tracing::warn!(path = %path.display(), line = i + 1, "skipping unreadable event: {e}"),
                }
            }
            out.insert(id.to_string(), events);
        }
        Ok(out)
    }
}
