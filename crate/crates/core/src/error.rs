use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range 0..{bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("attack error on sample {sample}: {message}")]
    Attack { sample: usize, message: String },

    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: u64, message: String },

    #[error("checkpoint {kind}: {message}")]
    Checkpoint {
        kind: CheckpointErrorKind,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinguishable checkpoint failure codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    BadMagic,
    UnsupportedVersion,
    CrcMismatch,
    Truncated,
    ArchitectureMismatch,
    Malformed,
}

impl std::fmt::Display for CheckpointErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::BadMagic => "bad magic",
            Self::UnsupportedVersion => "unsupported version",
            Self::CrcMismatch => "crc mismatch",
            Self::Truncated => "truncated",
            Self::ArchitectureMismatch => "architecture mismatch",
            Self::Malformed => "malformed",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Self::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(kind: CheckpointErrorKind, message: impl Into<String>) -> Self {
        Self::Checkpoint {
            kind,
            message: message.into(),
        }
    }

    /// The checkpoint failure code, if this is a checkpoint error.
    pub fn checkpoint_kind(&self) -> Option<CheckpointErrorKind> {
        match self {
            Self::Checkpoint { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}
