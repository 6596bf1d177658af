use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported document version {found:?} (expected {expected:?})")]
    Version { expected: String, found: String },

    #[error("invalid program graph: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<crate::graph::Violation>),

    #[error("unknown module id {0}")]
    UnknownModule(usize),

    #[error("partition covers {partition} functions but graph has {graph}")]
    PartitionSize { partition: usize, graph: usize },

    #[error("unknown function id {0:?} in partition document")]
    UnknownFunction(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent database: {0}")]
    Corrupt(String),

    #[error("export failed: {0}")]
    Export(String),

    #[error("signature database is empty")]
    EmptyDatabase,

    #[error("unknown report format {0:?}")]
    UnknownFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Malformed {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
