use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed data in {path}: {reason} (byte offset {offset})")]
    Data {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {reason}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error("freeze violation: parameter {0} changed during weight-generator training")]
    FreezeViolation(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
