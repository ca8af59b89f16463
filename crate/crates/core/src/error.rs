//! Error types shared across the engine.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of checkpoint loading, kept separate so callers can
/// distinguish an incompatible file from a corrupt one.
#[derive(Debug)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated(&'static str),
    ChecksumMismatch(&'static str),
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Truncated(section) => {
                write!(f, "checkpoint truncated in section `{section}`")
            }
            CheckpointError::ChecksumMismatch(section) => {
                write!(f, "checksum mismatch in section `{section}`")
            }
            CheckpointError::Malformed(msg) => write!(f, "malformed checkpoint: {msg}"),
        }
    }
}

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch; the message names the offending shapes.
    Shape(String),
    /// Invalid configuration or violated call contract.
    Config(String),
    /// Malformed or unsupported input data (annotations, tags, splits).
    Data(String),
    /// WAV file with a header we cannot parse.
    MalformedWav(String),
    /// WAV file in an encoding we do not support.
    UnsupportedWav(String),
    /// Filesystem failure, annotated with the path involved.
    Io { path: String, source: io::Error },
    /// Non-finite value where a finite one is required (loss, metric).
    Numeric(String),
    /// Checkpoint file could not be loaded.
    Checkpoint(CheckpointError),
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::MalformedWav(msg) => write!(f, "malformed wav: {msg}"),
            Error::UnsupportedWav(msg) => write!(f, "unsupported wav: {msg}"),
            Error::Io { path, source } => write!(f, "io error on `{path}`: {source}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}
