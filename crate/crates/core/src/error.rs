use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("schedule position {position} out of range (schedule has {len} positions)")]
    ScheduleRange { position: usize, len: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown caption {0:?}")]
    UnknownCaption(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance masks overlap: {first} and {second} in frame {frame}")]
    OverlappingMasks {
        first: String,
        second: String,
        frame: usize,
    },

    #[error("no inverted latent near timestep {0}")]
    MissingTimestep(usize),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidSchedule(_) => ErrorClass::Config,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Phase { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
