use thiserror::Error;

/// Errors surfaced by model construction and likelihood evaluation.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Input violated a documented precondition (shape, range, finiteness).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The stationary-distribution linear system is singular or too
    /// ill-conditioned to pin down a unique solution.
    #[error("stationary distribution is not unique: {0}")]
    NonUniqueStationary(String),

    /// The forward recursion hit a step with total probability zero.
    /// `tau` is the 1-based observation index of the offending step.
    #[error("likelihood is zero at observation {tau}: data impossible under the model")]
    ZeroLikelihood { tau: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
