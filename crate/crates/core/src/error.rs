use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called before forward on {0}")]
    BackwardBeforeForward(&'static str),

    #[error("batch size {0} is too small for train-mode batch normalization (need >= 2)")]
    BatchTooSmall(usize),

    #[error("label {0} is not a valid class (expected 0 = fire or 1 = no-fire)")]
    InvalidLabel(u8),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("ensemble member {member} failed: {source}")]
    EnsembleMember {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("class {class} is out of range (table has {classes} classes)")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("date index {date} is out of range: {reason}")]
    DateOutOfRange { date: usize, reason: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch for {what}: header says {expected:016x}, payload hashes to {found:016x}")]
    Checksum {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("architecture mismatch: expected {expected}, file holds {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("infeasible fire target: {requested} fires per year requested but only {available} susceptible pixel-days in the fire window")]
    InfeasibleFireTarget { requested: usize, available: usize },

    #[error("no fire samples survived the CLC and border filters")]
    NoFireSamples,

    #[error("year {year}: no-fire candidate pool has {pool} locations, {required} required")]
    NegativePool {
        year: i32,
        pool: usize,
        required: usize,
    },

    #[error("sample year {0} is not covered by any split")]
    UncoveredYear(i32),

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("{0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::EnsembleMember { source, .. } => source.class(),
            Error::Config(_) | Error::Invalid(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
