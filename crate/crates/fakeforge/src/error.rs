//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A manifest/store/dataset line failed to parse.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Two manifest records share an id.
    #[error("duplicate id {id:?}: first at line {first_line}, again at line {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    /// Filesystem failure, with the path that triggered it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image could not be decoded.
    #[error("unreadable image for record {record_id:?} at {path}: {message}")]
    ImageUnreadable {
        record_id: String,
        path: PathBuf,
        message: String,
    },

    /// An endpoint call failed for good after the retry budget was spent.
    #[error("endpoint {endpoint} failed after {attempts} attempt(s): {message}")]
    Endpoint {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    /// Caller violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A model reply did not obey the required output contract.
    #[error("format violation: {0}")]
    FormatViolation(String),

    /// The classifier reply matched none of the open-set category names.
    #[error("unclassifiable: reply {reply:?} matches none of {expected:?}")]
    Unclassifiable {
        reply: String,
        expected: Vec<String>,
    },

    /// A perturbation parameter fell outside its documented range.
    #[error("parameter out of range for {kind}: {message}")]
    ParameterOutOfRange { kind: String, message: String },

    /// Numeric routine lost the plot.
    #[error("diverged: {0}")]
    Diverged(String),

    /// Configuration file or endpoint registry problem.
    #[error("config error: {0}")]
    Config(String),

    /// Artifact digests do not line up (stale inputs, edited prompts, ...).
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    /// Catch-all for harness-level failures that need no dedicated variant.
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
