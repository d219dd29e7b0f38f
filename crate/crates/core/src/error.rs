use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("audio too short: {samples} samples, need at least {needed} for one frame")]
    TooShort { samples: usize, needed: usize },

    #[error("frame count mismatch for utterance {utt}: features have {expected} frames, {what} has {found}")]
    Misaligned {
        utt: String,
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("stage `{stage}` has not been run: {detail}")]
    MissingStage { stage: String, detail: String },

    #[error("insufficient speech: {0}")]
    Insufficient(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by the caller's inputs or ordering (bad config,
    /// missing prerequisite stage, malformed files) rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
            || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
