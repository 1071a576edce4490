use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12; encoder returned a degenerate embedding")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("text is empty after trimming whitespace")]
    EmptyText,

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("protocol error: {0}")]
    ProtocolError(String),

    #[error("no fixture recorded for prompt hash {0}")]
    FixtureMiss(String),

    #[error("preference already present: {0:?}")]
    DuplicatePreference(String),

    #[error("unknown preference id {0:?}")]
    UnknownPreference(String),

    #[error("preference profile is empty")]
    EmptyProfile,

    #[error(
        "encoder fingerprint mismatch: profile built with {profile:?}, backend is {backend:?}"
    )]
    FingerprintMismatch { profile: String, backend: String },

    #[error("malformed LM response: {0}")]
    MalformedResponse(String),

    #[error("corrupt store file: {0}")]
    CorruptFile(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("input collection is empty")]
    EmptyInput,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of an external model service, as opposed to bad input.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable(_) | Error::ProtocolError(_) | Error::FixtureMiss(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
