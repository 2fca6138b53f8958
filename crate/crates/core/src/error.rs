use thiserror::Error;

/// Errors raised by the simulation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (invalid site, time outside the horizon, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A parameter set violates a model invariant (rate above alpha, non positive-definite covariance, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A numerical routine did not reach its tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An experiment stage was invoked before the stage it depends on.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Malformed input data (CSV rows, bitstrings, missing columns).
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
