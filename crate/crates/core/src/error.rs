use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("{what} {index} out of range (must be < {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("decomposition does not match problem: {0}")]
    PlanMismatch(String),

    #[error("fixup protocol violation: {0}")]
    Protocol(String),

    #[error("worker {0} stopped after another worker failed")]
    Aborted(usize),

    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("padded and unpadded results differ in {mismatches} element(s)")]
    PaddingChangedResult { mismatches: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}
