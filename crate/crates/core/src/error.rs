use thiserror::Error;

/// Errors raised by the library.
///
/// [`Error::is_validation`] separates input problems (CLI exit code 2) from
/// numerical failures (exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("stencil/lattice mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite energy at iteration {iteration}")]
    NonFinite { iteration: usize, dump: Vec<f64> },

    #[error("divergent integral: {0}")]
    Divergent(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Mismatch(_) | Error::Unsupported(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
