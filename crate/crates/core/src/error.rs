use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum MklError {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical routine failed (non-convergence, reconstruction failure, singular whitening).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A function cannot be represented in the requested space (e.g. divergent norm).
    #[error("representation error: {0}")]
    Representation(String),

    /// Every candidate fit failed during validation-based selection.
    #[error("selection failed: all {} candidate fits failed", .failures.len())]
    Selection { failures: Vec<(String, String)> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl MklError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        MklError::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        MklError::Numeric(msg.into())
    }

    /// True for failures of numerical routines, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MklError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, MklError>;
