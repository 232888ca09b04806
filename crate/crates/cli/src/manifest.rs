//! Experiment manifest: resolved config plus every stage's artifacts and
//! their checksums.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{CliError, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage's config and its inputs' checksums.
    pub key: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Insert or replace a record, keeping `order` (stage names) sorted.
    pub fn record(&mut self, rec: StageRecord, order: &[&str]) {
        self.stages.retain(|s| s.name != rec.name);
        self.stages.push(rec);
        let pos = |n: &str| order.iter().position(|o| *o == n).unwrap_or(usize::MAX);
        self.stages.sort_by_key(|s| pos(&s.name));
    }

    pub fn load(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(dir.join(MANIFEST_FILE), text)
            .map_err(|e| CliError::Stage { stage: "manifest", message: format!("cannot write manifest: {e}") })
    }

    /// Paths whose on-disk checksum differs from the record (or are missing).
    pub fn verify_files(&self, dir: &Path) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| &s.artifacts)
            .filter(|a| file_sha256(&dir.join(&a.path)).as_deref() != Some(a.sha256.as_str()))
            .map(|a| a.path.clone())
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}
