use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One pipeline stage as last executed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub config_hash: String,
    pub seconds: f64,
    /// Output-relative path → SHA-256 of every file the stage wrote.
    pub artifacts: BTreeMap<String, String>,
    /// Short facts worth surfacing in the summary (counts, losses).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// Provenance of an output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Keyed by stage name: `gen`, `train`, `edit:<label>`, `eval`.
    pub stages: BTreeMap<String, StageRecord>,
}

/// A checksum that no longer matches, or an artifact that disappeared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyFailure {
    pub stage: String,
    pub path: String,
    pub problem: String,
}

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.stage, self.path, self.problem)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    /// Parses a manifest; an empty document is a usage error, anything that
    /// is not a manifest is corrupt.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Usage(format!("{} is empty", origin.display())));
        }
        let m: RunManifest = serde_json::from_str(text).map_err(|e| Error::Corrupt {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.stages.is_empty() {
            return Err(Error::Usage(format!("{} lists no stages", origin.display())));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// The manifest in `out`, or a fresh one when none exists yet.
    pub fn load_or_new(out: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        let path = Self::path(out);
        if path.exists() {
            let mut m = Self::load(&path)?;
            m.config_hash = config_hash.to_string();
            m.seed = seed;
            Ok(m)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                seed,
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = Self::path(out);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Drops every stage whose name starts with `prefix`.
    pub fn clear(&mut self, prefix: &str) {
        self.stages.retain(|k, _| !k.starts_with(prefix));
    }

    /// Recomputes every listed checksum under `out`.
    pub fn verify(&self, out: &Path) -> Vec<VerifyFailure> {
        let mut failures = Vec::new();
        for (stage, record) in &self.stages {
            for (rel, expected) in &record.artifacts {
                let problem = match sha256_file(&out.join(rel)) {
                    Ok(actual) if &actual == expected => continue,
                    Ok(actual) => format!("checksum {actual} does not match recorded {expected}"),
                    Err(Error::Io { source, .. }) => format!("unreadable ({source})"),
                    Err(e) => e.to_string(),
                };
                failures.push(VerifyFailure {
                    stage: stage.clone(),
                    path: rel.clone(),
                    problem,
                });
            }
        }
        failures
    }
}
