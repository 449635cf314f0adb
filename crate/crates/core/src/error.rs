use thiserror::Error;

/// Errors surfaced by the core library.
///
/// Variants map one-to-one onto the HTTP statuses the gateway returns, so the
/// service layer never has to inspect messages to pick a status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{0} not found")]
    NotFound(String),

    /// Deliberately carries no detail: unknown, revoked and malformed
    /// credentials must be indistinguishable to the caller.
    #[error("invalid credentials")]
    Auth,

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("version conflict on {keyspace}/{key}: expected {expected}, found {found}")]
    VersionConflict {
        keyspace: &'static str,
        key: String,
        expected: u64,
        found: u64,
    },

    #[error("insufficient budget: requested {requested}, available {available}")]
    InsufficientBudget { requested: u64, available: u64 },

    #[error("unsupported document format: {0}")]
    UnsupportedFormat(String),

    #[error("document is not valid UTF-8: {0}")]
    Encoding(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("storage corrupt: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Error::NotFound(what.into())
    }
}
