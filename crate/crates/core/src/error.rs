use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: empty vectors, mismatched shapes, missing prerequisites.
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric precondition failed (e.g. a zero sampling probability).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration field holds an invalid value.
    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A rollout group has no valid responses, so no pseudo-label exists.
    #[error("prompt {0} has no valid rollouts")]
    NoValidRollouts(usize),

    /// The kernel restricted to the centered subspace is (numerically) singular.
    #[error("restricted kernel is singular (lambda_min = {0:e})")]
    SingularRestriction(f64),

    /// A theory instance does not satisfy the assumptions of the check.
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
