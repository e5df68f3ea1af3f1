use std::io;

use thiserror::Error;

/// Errors produced anywhere in the federated prompt-tuning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("client shard is empty")]
    EmptyShard,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label {label} out of range for {num_classes} classes (line {line})")]
    InvalidLabel {
        line: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("cannot split {examples} examples across {clients} clients")]
    TooManyClients { examples: usize, clients: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("poisoning error: {0}")]
    Poison(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed frame at byte {offset}: {reason}")]
    MalformedFrame { offset: usize, reason: String },

    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: u32,
        client: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Strips any [`Error::Client`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Client { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
