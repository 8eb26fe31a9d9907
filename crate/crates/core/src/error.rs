use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record in an input file could not be parsed. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),

    #[error("unknown document id `{0}`")]
    UnknownDocId(String),

    #[error("{kind} version mismatch: expected {expected}, found {found}")]
    VersionMismatch {
        kind: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Class weights need both classes present; train unweighted instead.
    #[error(
        "class weights need at least one positive and one negative label \
         (found {positives} positive, {negatives} negative); fall back to unweighted training"
    )]
    SingleClass { positives: usize, negatives: usize },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    /// A pipeline stage needs a file produced by an earlier stage.
    #[error("missing {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
