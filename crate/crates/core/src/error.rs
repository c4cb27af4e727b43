use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid normalization spec: {0}")]
    InvalidSpec(String),

    #[error("batch of {0} rows cannot be normalized across the batch in training mode")]
    DegenerateBatch(usize),

    #[error("backward called on {0} without a matching forward")]
    MissingCache(&'static str),

    #[error("{0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{key}: {msg}")]
    Config { key: String, msg: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown probe site `{site}` (valid: {valid})")]
    UnknownSite { site: String, valid: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training: {0}")]
    Train(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    /// Stable prefix used when the CLI reports this error on stderr.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::InvalidSpec(_) | Error::UnknownSite { .. } => "config",
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => "data",
            Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => "checkpoint",
            Error::Dimension { .. }
            | Error::NonFinite(_)
            | Error::DegenerateBatch(_)
            | Error::MissingCache(_)
            | Error::UndefinedMetric(_)
            | Error::Train(_) => "train",
        }
    }
}
