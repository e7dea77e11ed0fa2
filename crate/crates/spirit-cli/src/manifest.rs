//! Run manifests: every command that writes outputs writes one manifest next
//! to them tying the outputs to input hashes, the fully resolved config,
//! backend identifiers and seeds. With oracle backends that is enough to
//! reproduce the run byte-identically.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileRef>,
    pub outputs: Vec<String>,
    pub backends: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Names of recognized environment variables that were set; values are
    /// never recorded.
    pub env_keys: Vec<String>,
    pub tool_version: String,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            version: 1,
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            backends: BTreeMap::new(),
            seeds: BTreeMap::new(),
            env_keys: crate::config::present_env_keys(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let data = std::fs::read(path)
            .with_context(|| format!("hashing input {}", path.display()))?;
        let mut hasher = Sha256::new();
        hasher.update(&data);
        self.inputs.insert(
            role.to_string(),
            FileRef {
                path: path.display().to_string(),
                sha256: hex::encode(hasher.finalize()),
            },
        );
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn add_backend(&mut self, role: &str, id: &str) {
        self.backends.insert(role.to_string(), id.to_string());
    }

    pub fn add_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    /// Writes `<stem>.manifest.json` next to the outputs.
    pub fn write(&self, out_stem: &Path) -> Result<()> {
        let path = manifest_path(out_stem);
        let json = serde_json::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// `x.jsonl` -> `x.manifest.json` (the final extension is replaced).
pub fn manifest_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("manifest.json")
}
