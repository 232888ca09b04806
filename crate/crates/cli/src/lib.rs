//! Experiment orchestration for the fact-recall workbench: configuration,
//! checksummed stage caching, manifests and report emission.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use manifest::{Artifact, ExperimentManifest, StageRecord};
pub use pipeline::{run_pipeline, RunOptions, RunSummary, Stage};

use factscope_core::Error;

/// Manifest and report schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("stage {stage}: detection failure: {message}")]
    Detection { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
            CliError::Detection { .. } => 4,
        }
    }

    /// Classify a core error raised while running `stage`.
    pub fn from_core(stage: &'static str, e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Extraction(m) => CliError::Detection { stage, message: m },
            other => CliError::Stage { stage, message: other.to_string() },
        }
    }
}
