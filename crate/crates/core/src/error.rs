use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("ingestion error: document `{0}` is missing from the embedding manifest")]
    MissingDocument(String),

    #[error("alignment error in `{doc}`: character range [{start}, {end}) does not overlap any token")]
    Alignment { doc: String, start: usize, end: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numeric failure in document `{doc}` at step {step}: {detail}")]
    Numeric {
        doc: String,
        step: usize,
        detail: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
