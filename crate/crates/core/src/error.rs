use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric fault: non-finite value produced by {0}")]
    NumericFault(&'static str),

    #[error("codec error at byte {offset}: {message}")]
    Codec { offset: u64, message: String },

    #[error("ingest error in {}: {message}", file.display())]
    Ingest { file: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("bank error: {0}")]
    Bank(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown clip: {0}")]
    UnknownClip(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
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

    pub(crate) fn codec(offset: u64, msg: impl Into<String>) -> Self {
        Error::Codec {
            offset,
            message: msg.into(),
        }
    }
}
