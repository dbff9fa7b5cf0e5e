//! Run manifests: what went in, what came out, and how to do it again.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clonealign::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Digest of `bytes` framed like a git blob (`blob <len>\0` prefix), with
/// SHA-256 in place of SHA-1.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub hash: String,
}

impl InputDigest {
    pub fn of_file(role: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            role: role.into(),
            path: path.display().to_string(),
            hash: blob_hash(&bytes),
        })
    }
}

/// Everything but the timestamps is covered by `content_hash`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Stage argument of the train command.
    pub stage: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    pub content_hash: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(
        command: &str,
        stage: &str,
        seed: u64,
        config: RunConfig,
        inputs: Vec<InputDigest>,
        outputs: Vec<String>,
        started_at: u64,
    ) -> Self {
        let mut m = Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            stage: stage.into(),
            seed,
            config,
            inputs,
            outputs,
            content_hash: String::new(),
            started_at,
            finished_at: unix_now(),
        };
        m.content_hash = m.compute_hash();
        m
    }

    /// Hash of the manifest with timestamps and the hash itself blanked.
    pub fn compute_hash(&self) -> String {
        let mut c = self.clone();
        c.content_hash.clear();
        c.started_at = 0;
        c.finished_at = 0;
        blob_hash(&serde_json::to_vec(&c).expect("manifest serializes"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_frames_the_content() {
        let mut h = Sha256::new();
        h.update(b"blob 3\0abc");
        assert_eq!(blob_hash(b"abc"), format!("sha256:{}", hex::encode(h.finalize())));
        assert_ne!(blob_hash(b"abc"), blob_hash(b"abd"));
    }

    #[test]
    fn content_hash_ignores_timestamps() {
        let a = RunManifest::new("train", "all", 1, RunConfig::default(), vec![], vec!["x".into()], 5);
        let mut b = a.clone();
        b.started_at = 99;
        b.finished_at = 100;
        assert_eq!(a.compute_hash(), b.compute_hash());
        assert_eq!(a.content_hash, a.compute_hash());
        b.seed = 2;
        assert_ne!(a.compute_hash(), b.compute_hash());
    }
}
