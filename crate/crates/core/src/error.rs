//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shape contract violation.
    Shape(String),
    /// An argument outside its documented domain (alpha range, empty axis
    /// set, unsupported depth, ...).
    InvalidArg(String),
    /// gradCAM asked for an activation name the network does not record.
    UnknownLayer(String),
    /// Config file parse failure.
    Config { line: usize, msg: String },
    Io(std::io::Error),
    /// Dataset or image file malformed (message carries the byte offset
    /// where applicable).
    DataFormat(String),
    /// Checkpoint file does not start with the expected magic bytes.
    BadMagic,
    /// Checkpoint carries a format version this build does not understand.
    BadVersion(u32),
    /// Checkpoint file ends before the declared content.
    Truncated { offset: u64 },
    /// Checkpoint payload-length checksum does not match the payload read.
    CorruptPayload { expected: u64, got: u64 },
    /// Checkpoint is missing a tensor the current model requires.
    MissingParam(String),
    /// Training loss became non-finite.
    NanLoss { epoch: usize, step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::UnknownLayer(name) => write!(f, "unknown activation layer: {name}"),
            Error::Config { line, msg } => write!(f, "config line {line}: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::DataFormat(msg) => write!(f, "data format error: {msg}"),
            Error::BadMagic => write!(f, "checkpoint: bad magic"),
            Error::BadVersion(v) => write!(f, "checkpoint: unknown version {v}"),
            Error::Truncated { offset } => {
                write!(f, "checkpoint: truncated at byte offset {offset}")
            }
            Error::CorruptPayload { expected, got } => write!(
                f,
                "checkpoint: payload length checksum mismatch (expected {expected}, got {got})"
            ),
            Error::MissingParam(name) => {
                write!(f, "checkpoint: missing tensor for parameter {name}")
            }
            Error::NanLoss { epoch, step } => {
                write!(f, "training aborted: non-finite loss at epoch {epoch}, step {step}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
