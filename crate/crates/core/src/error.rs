use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MadiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MadiError {
    /// A caller broke an operation's precondition (wrong rank, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Backward produced a non-finite gradient.
    #[error("non-finite gradient at tape node {node} ({op})")]
    Numerical { node: usize, op: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {component} is not finite")]
    Diverged { step: usize, component: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MadiError {
    pub fn contract(msg: impl Into<String>) -> Self {
        MadiError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MadiError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MadiError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            MadiError::Config(_)
                | MadiError::Validation(_)
                | MadiError::Parse { .. }
                | MadiError::Io { .. }
                | MadiError::Checkpoint(_)
        )
    }
}
