use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("{}: mask value {value} outside {{0, 255}}", path.display())]
    MaskDomain { path: PathBuf, value: u8 },

    #[error("{}: truncated data, expected {expected} bytes but found {found}", path.display())]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})", path.display())]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("zero-shot hygiene violated: {0}")]
    Provenance(String),

    #[error("{0}")]
    Data(String),
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

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite(_) | Error::Divergence(_) | Error::Shape { .. } | Error::Backward(_) => 3,
            _ => 2,
        }
    }
}
