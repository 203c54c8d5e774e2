use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found: {0}")]
    MissingPath(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{location}: malformed record: {message}")]
    MalformedRecord { location: String, message: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus too small for (k1={k1}, k2={k2}, k3={k3}): no eligible anchor")]
    CorpusTooSmall { k1: usize, k2: usize, k3: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("id {id} out of range (size {size})")]
    IdOutOfRange { id: u32, size: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad binary format: {0}")]
    Format(String),
    #[error("head {kind} is not usable here: {reason}")]
    HeadMismatch { kind: String, reason: String },
    #[error("no eligible queries: every query lacks a positive candidate")]
    NoEligibleQueries,
    #[error("degenerate: identical samples")]
    DegenerateSamples,
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::HeadMismatch { .. } => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn malformed(location: impl Into<String>, message: impl ToString) -> Self {
        Error::MalformedRecord {
            location: location.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
