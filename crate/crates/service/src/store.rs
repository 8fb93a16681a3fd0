//! On-disk sessions. Each session lives in its own directory:
//!
//! ```text
//! <root>/<id>/session.json     {"version": 1, "id": ..., "config": {...}}
//! <root>/<id>/events.jsonl     accepted events up to the last episode boundary
//! <root>/<id>/dataset.txt      TeacherDataset at that boundary
//! <root>/<id>/checkpoint.json  latest finished learner checkpoint
//! ```
//!
//! Every file is replaced atomically. Loading replays the event log, so a
//! session resumes at its last completed episode boundary and anything after
//! it (an unfinished episode) is discarded. The stored dataset is checked
//! against the replayed one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bam_core::dataset::{write_atomic, TeacherDataset};
use bam_core::domains::Environment;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::SessionEvent;
use crate::session::{Session, SessionConfig, SessionError};

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("unknown environment `{0}`")]
    Environment(String),
    #[error("unsupported session file version {0}")]
    Version(u32),
    #[error("stored dataset of `{0}` does not match its event log")]
    Mismatch(String),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    id: String,
    config: SessionConfig,
}

/// Loaded environments by name.
pub type Catalog = BTreeMap<String, Arc<Environment>>;

#[derive(Clone, Debug)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.dir(id).join("session.json").is_file()
    }

    pub fn ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Writes the session up to its last episode boundary. The checkpoint is
    /// written only when no refit is running, unless `wait` is set.
    pub fn persist(&self, session: &mut Session, wait: bool) -> Result<(), StoreError> {
        let dir = self.dir(session.id());
        std::fs::create_dir_all(&dir)?;
        let header = Header {
            version: STORE_VERSION,
            id: session.id().to_string(),
            config: session.config().clone(),
        };
        write_atomic(
            &dir.join("session.json"),
            serde_json::to_string_pretty(&header).expect("header serializes").as_bytes(),
        )?;
        let mut events = String::new();
        for e in &session.log()[..session.boundary()] {
            events.push_str(&serde_json::to_string(e).expect("event serializes"));
            events.push('\n');
        }
        write_atomic(&dir.join("events.jsonl"), events.as_bytes())?;
        if session.boundary() == session.log().len() {
            write_atomic(&dir.join("dataset.txt"), session.dataset().to_text().as_bytes())?;
        }
        let cp = if wait { Some(session.checkpoint()) } else { session.try_checkpoint() };
        if let Some(cp) = cp {
            cp.store(dir.join("checkpoint.json")).map_err(|e| StoreError::Corrupt {
                path: dir.join("checkpoint.json"),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn read_events(&self, id: &str) -> Result<Vec<SessionEvent>, StoreError> {
        let path = self.dir(id).join("events.jsonl");
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Recreates a session by replaying its stored log.
    pub fn load(&self, id: &str, catalog: &Catalog) -> Result<Session, StoreError> {
        if !self.exists(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let path = self.dir(id).join("session.json");
        let header: Header =
            serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
        if header.version != STORE_VERSION {
            return Err(StoreError::Version(header.version));
        }
        let env = catalog
            .get(&header.config.environment)
            .cloned()
            .ok_or_else(|| StoreError::Environment(header.config.environment.clone()))?;
        let events = self.read_events(id)?;
        let session = Session::replay(header.id, header.config, env, &events)?;
        let dataset_path = self.dir(id).join("dataset.txt");
        if dataset_path.is_file() {
            let stored = TeacherDataset::load(&dataset_path).map_err(|e| StoreError::Corrupt {
                path: dataset_path.clone(),
                message: e.to_string(),
            })?;
            if &stored != session.dataset() {
                return Err(StoreError::Mismatch(id.to_string()));
            }
        }
        Ok(session)
    }
}

/// Session ids are used as directory names.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}
