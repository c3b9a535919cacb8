use thiserror::Error;

/// Errors across the engine, environments, and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for an operation.
    #[error("{op}: dimension mismatch ({details})")]
    Dimension { op: &'static str, details: String },

    /// Backward was requested on an empty or truncated tape.
    #[error("backward on an empty or truncated tape")]
    DeadTape,

    /// A non-finite value appeared where a finite one is required.
    /// `context` names the offending parameter or input.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The class pool cannot supply enough fresh labels for a new task.
    #[error("task generation failed: {0}")]
    TaskGeneration(String),

    /// A dataset or checkpoint file did not parse.
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    /// Invalid experiment or trainer configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension { op, details: details.into() }
    }
}
