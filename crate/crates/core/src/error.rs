use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A failure tied to one element of a batch (candidate, corpus pair, source).
    #[error("{what} {index}: {source}")]
    At {
        what: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A failure while filling entry (j, i) of a utility matrix.
    #[error("utility ({row}, {col}): {source}")]
    Pair {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    /// A pipeline stage failed; artifacts of earlier stages are kept.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Remote(#[from] RemoteError),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn at(what: &'static str, index: usize, source: Error) -> Self {
        Error::At {
            what,
            index,
            source: Box::new(source),
        }
    }

    pub fn format(what: &'static str, detail: impl ToString) -> Self {
        Error::Format {
            what,
            detail: detail.to_string(),
        }
    }

    /// Walks `At`/`Pair`/`Stage` wrappers down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::At { source, .. } | Error::Pair { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.root(), Error::Remote(_))
    }
}

/// Failures of the remote scoring client. Every variant names the batch that
/// failed; `batch` counts request partitions of at most 256 items.
#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("batch {batch}: timed out after {attempts} attempt(s)")]
    Timeout { batch: usize, attempts: u32 },

    #[error("batch {batch}: transport failure after {attempts} attempt(s): {detail}")]
    Transport {
        batch: usize,
        attempts: u32,
        detail: String,
    },

    #[error("batch {batch}: HTTP {status}: {message}")]
    Status {
        batch: usize,
        status: u16,
        message: String,
    },

    #[error("batch {batch}: malformed response: {detail}")]
    Malformed { batch: usize, detail: String },
}

impl RemoteError {
    pub fn batch(&self) -> usize {
        match self {
            RemoteError::Timeout { batch, .. }
            | RemoteError::Transport { batch, .. }
            | RemoteError::Status { batch, .. }
            | RemoteError::Malformed { batch, .. } => *batch,
        }
    }
}
