//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor primitive. Names the op and the offending dims.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// A public op produced NaN/Inf. Carries the first offending op.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Config or precondition validation failure.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A gradient was supplied for a parameter outside the trainable mask.
    #[error("gradient for frozen parameter {0}")]
    FrozenParam(String),

    /// Finite-difference oracle refused: parameter count over budget.
    #[error("finite-difference budget exceeded: {count} parameters > budget {budget}")]
    OracleBudget { count: usize, budget: usize },

    /// Training loss blew past the divergence ceiling.
    #[error("divergence at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Checkpoint file is corrupt or not a checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Manifest hash verification failure.
    #[error("hash mismatch for {path}: expected {expected}, got {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code per category: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Validation(_)
            | Error::FrozenParam(_)
            | Error::OracleBudget { .. } => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            Error::Io(_)
            | Error::Json(_)
            | Error::Checkpoint(_)
            | Error::HashMismatch { .. } => 4,
        }
    }
}
