//! Per-command JSON manifests: which config produced which files, with
//! content digests and summary statistics. Everything in a manifest except
//! `created_unix` is a pure function of the config and corpus, so re-running
//! a command reproduces the manifest up to that one field.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub corpus: u64,
    pub noise: u64,
}

/// One emitted file, identified by its name within the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub outputs: Vec<OutputFile>,
    /// Headline numbers (flip rate, τ₁₀₀, spike ratios, ...); keys sorted.
    pub summary: BTreeMap<String, serde_json::Value>,
    /// Wall-clock creation time, seconds since the epoch. The only field
    /// excluded from reproducibility guarantees.
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Manifest {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            seeds: Seeds {
                model: config.model.seed,
                corpus: config.corpus.seed,
                noise: config.numerics.noise_seed,
            },
            outputs: Vec::new(),
            summary: BTreeMap::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Digests `dir/name` and records it as an output of this command.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(OutputFile {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    /// Writes `dir/<command>.manifest.json`, pretty-printed, and returns the
    /// file name.
    pub fn write(&self, dir: &Path) -> Result<String> {
        let name = format!("{}.manifest.json", self.command);
        let path = dir.join(&name);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, json.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(name)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Capacity(format!("{}: bad manifest: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
