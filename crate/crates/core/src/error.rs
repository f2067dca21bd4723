use alloc::string::String;

/// Failure modes shared across the crate.
///
/// Configuration problems and numerical faults are kept apart so callers can
/// map them to distinct exit statuses.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("value {value} outside domain of `{what}` ({domain})")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("non-finite value in {what} at epoch {epoch}")]
    NumericalFault { what: &'static str, epoch: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFault { .. })
    }
}

pub type Result<T> = core::result::Result<T, Error>;
