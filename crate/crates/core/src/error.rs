use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("every key is masked for query row {row}")]
    AllMasked { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid play {play_id}: {reason}")]
    InvalidPlay { play_id: String, reason: String },

    #[error("unknown role {0:?}")]
    UnknownRole(String),

    #[error("role id {0} out of range (0..8)")]
    RoleOutOfRange(usize),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("line {line}: {detail}")]
    Parse { line: u64, detail: String },

    #[error("route concept {concept:?}: {detail}")]
    Route { concept: String, detail: String },

    #[error("no valid (agent, frame) pairs to score")]
    NoValidPairs,

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
