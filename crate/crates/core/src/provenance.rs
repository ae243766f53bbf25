//! Provenance block embedded in every artifact the toolkit writes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ChainError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Configuration snapshot used to produce the artifact.
    pub config: Value,
    /// Input file label → SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config: &impl Serialize) -> Self {
        Provenance {
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_file(mut self, label: impl Into<String>, path: &Path) -> Result<Self> {
        self.inputs.insert(label.into(), sha256_file(path)?);
        Ok(self)
    }

    pub fn with_digest(mut self, label: impl Into<String>, digest: String) -> Self {
        self.inputs.insert(label.into(), digest);
        self
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| ChainError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}
