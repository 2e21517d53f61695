use std::path::PathBuf;

use afr_core::AfrError;
use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifacts in {}: expected {}", dir.display(), missing.join(", "))]
    MissingArtifacts { dir: PathBuf, missing: Vec<String> },

    #[error("numerical divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingArtifacts { .. } => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<AfrError> for CliError {
    fn from(e: AfrError) -> Self {
        match e {
            AfrError::Divergence { .. } => CliError::Divergence(e.to_string()),
            AfrError::InvalidSpec { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
