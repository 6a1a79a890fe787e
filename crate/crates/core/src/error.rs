use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("parameter vector does not match model spec: {0}")]
    SpecMismatch(String),

    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("split has no samples: {0}")]
    EmptySplit(String),

    #[error("aggregation called with no client updates")]
    NoUpdates,

    #[error("update for round {got} rejected, server is in round {expected}")]
    StaleUpdate { got: u32, expected: u32 },

    #[error("client {0} already submitted this round")]
    DuplicateClient(String),

    #[error("client {0} is not on the roster")]
    UnknownClient(String),

    #[error("unexpected message {msg} in server phase {phase}")]
    UnexpectedMessage { msg: &'static str, phase: &'static str },

    #[error("bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("unsupported version {got}, expected {expected}")]
    VersionMismatch { got: u16, expected: u16 },

    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("federation aborted in round {round}: {reason}")]
    FederationAborted { round: u32, reason: String },

    #[error("training history has no candidates")]
    NoCandidates,

    #[error("invalid site profile: {0}")]
    InvalidProfile(String),

    #[error("{patients} patients cannot fill {splits} splits")]
    TooFewPatients { patients: usize, splits: usize },

    #[error("kappa undefined: chance agreement is 1")]
    DegenerateMarginals,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
