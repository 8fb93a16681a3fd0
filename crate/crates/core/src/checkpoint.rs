//! Versioned learner checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! { "version": 1, "algorithm": "bam", "environment": "doorway",
//!   "config_hash": "<sha256 hex>", "agent": { theta, phi, global, optimizer, tables } }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so loading a
//! checkpoint reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{Agent, Algorithm};
use crate::dataset::write_atomic;
use crate::error::CheckpointError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub environment: String,
    pub config_hash: String,
    pub agent: Agent,
}

impl Checkpoint {
    pub fn new(agent: Agent, environment: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            algorithm: agent.algorithm,
            environment: environment.into(),
            config_hash: config_hash.into(),
            agent,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.agent.algorithm != cp.algorithm {
            return Err(CheckpointError::Algorithm {
                expected: cp.algorithm.to_string(),
                found: cp.agent.algorithm.to_string(),
            });
        }
        Ok(cp)
    }

    /// Loads a checkpoint, optionally insisting on its algorithm tag.
    pub fn load(path: impl AsRef<Path>, expect: Option<Algorithm>) -> Result<Self, CheckpointError> {
        let cp = Self::from_json(&std::fs::read_to_string(path)?)?;
        match expect {
            Some(a) if a != cp.algorithm => Err(CheckpointError::Algorithm {
                expected: a.to_string(),
                found: cp.algorithm.to_string(),
            }),
            _ => Ok(cp),
        }
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())?;
        Ok(())
    }
}

/// SHA-256 of the JSON form of `value`, hex encoded.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
