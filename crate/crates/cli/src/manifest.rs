//! Run manifests written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vilu_core::fsutil::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: Vec<String>,
    /// Effective configuration of the command, after flags and files merge.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub artifact: String,
    pub artifact_sha256: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Collects what a command read and how it was configured, then stamps
/// each artifact it writes.
pub struct Recorder {
    command_line: Vec<String>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: u64,
    started: u128,
}

impl Recorder {
    pub fn new(config: impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command_line: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            seed,
            started: unix_ms(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Writes `bytes` to `path` and its manifest beside it.
    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.stamp(path)
    }

    /// Writes the manifest for an artifact that is already on disk.
    pub fn stamp(&self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command_line: self.command_line.clone(),
            config_hash: sha256_hex(&serde_json::to_vec(&self.config)?),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            artifact: path.display().to_string(),
            artifact_sha256: file_sha256(path)?,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: unix_ms(),
        };
        let out = manifest_path(path);
        write_atomic(&out, &serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", out.display()))
    }
}
