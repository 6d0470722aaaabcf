use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by every module of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument did not hold.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed XML; `offset` is a byte offset into the document.
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: usize, message: String },

    #[error("unknown category name `{0}`")]
    UnknownCategory(String),

    /// Structurally valid XML whose content violates the annotation model.
    #[error("invalid annotation: {0}")]
    Annotation(String),

    /// Every failure encountered while loading a dataset manifest.
    #[error("failed to load dataset:\n  {}", .0.join("\n  "))]
    Load(Vec<String>),

    /// Binary file (pixmap, head tensor) with an unexpected layout.
    #[error("bad file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
