//! Run manifest: everything needed to reproduce a run, plus what happened.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{ConfigError, LabError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub stage: String,
    pub alpha: Option<f64>,
    /// Stream key; replica `r` draws from stream `r` of this key.
    pub key: u64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_hash: String,
    /// Effective configuration (after command-line overrides).
    pub config: ExperimentConfig,
    pub threads: usize,
    pub seeds: Vec<SeedRecord>,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn failed_stages(&self) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(|s| s.status == StageStatus::Failed)
    }

    /// Reads a manifest written by a previous run.
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| {
            ConfigError::Parse { line: Some(e.line()), message: format!("not a run manifest: {e}") }.into()
        })
    }
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}
