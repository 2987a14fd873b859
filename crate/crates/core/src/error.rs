use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the accepted domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file did not match its declared format.
    #[error("{path}: offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Two ranks (or an operator and its operands) disagree on a shape or
    /// precondition that the protocol requires them to share.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A collective did not complete before the configured deadline.
    #[error("collective on {axis} group timed out after {secs:.1}s (possible deadlock)")]
    Timeout { axis: String, secs: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
