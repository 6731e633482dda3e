use thiserror::Error;

/// Errors raised by the solvers in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("structural error: {0}")]
    Structure(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("capacity exceeded: {what} needs {needed}, cap is {cap}")]
    Capacity { what: String, needed: u128, cap: u128 },
    #[error("time step too large: lipschitz {lipschitz} * dt {dt} >= 1, increase the number of steps")]
    StepSize { lipschitz: f64, dt: f64 },
    #[error("iteration did not converge: {0}")]
    NonConvergence(String),
    #[error("strategy is not adapted: {0}")]
    Adaptedness(String),
    #[error("strategy extraction failed: {0}")]
    Extraction(String),
    #[error("non-finite state on path {path} at step {step}")]
    BlowUp { path: usize, step: usize },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;
