//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("adaptation aborted at batch {batch}: {message}")]
    Adaptation { batch: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of numerical origin (divergence, non-finite values,
    /// violated math contracts) as opposed to usage or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Training { .. }
                | Error::Adaptation { .. }
                | Error::DegenerateInput(_)
                | Error::Contract(_)
        )
    }
}
