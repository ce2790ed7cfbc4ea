//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value produced at path {path}, step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("Riccati solution lost positive definiteness (component {component}, t = {time})")]
    RiccatiSpd { component: usize, time: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged {
        epoch: usize,
        loss: f64,
        /// Per-epoch losses recorded up to the failure.
        history: Vec<f64>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
