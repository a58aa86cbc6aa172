use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("index {index} out of range for length {len} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("load error in {} ({record}): {msg}", path.display())]
    Load {
        path: PathBuf,
        record: String,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(
        path: impl Into<PathBuf>,
        record: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Load {
            path: path.into(),
            record: record.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
