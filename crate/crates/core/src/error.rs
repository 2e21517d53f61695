use thiserror::Error;

/// Errors produced by the reweighting toolkit.
#[derive(Debug, Error)]
pub enum AfrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid spec: `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("groups {missing:?} have no examples in the evaluation set")]
    MissingGroups { missing: Vec<usize> },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl AfrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AfrError::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: u64, reason: impl Into<String>) -> Self {
        AfrError::Parse {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = AfrError> = std::result::Result<T, E>;
