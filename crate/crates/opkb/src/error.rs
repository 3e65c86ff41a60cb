//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Kernel parameters or kernel values are invalid (non-finite entries,
    /// non-positive lengthscale, asymmetric Gram matrix, ...).
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    /// A matrix factorization failed even after jitter escalation.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Neural network training diverged (non-finite loss).
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
