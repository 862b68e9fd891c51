//! File formats and experiment orchestration on top of `adaptermix-core`.
//!
//! * [`checkpoint`]: JSON model checkpoints with per-tensor SHA-256 digests.
//! * [`corpus_io`]: line-delimited corpus files.
//! * [`records`]: loss-history and report writers.
//! * [`config`]: the TOML experiment configuration and `--set` overrides.
//! * [`experiment`]: the steps behind each CLI command.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod experiment;
pub mod records;

pub use adaptermix_core as core;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Core(#[from] adaptermix_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl std::fmt::Display) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for training
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Core(adaptermix_core::Error::Config { .. }) => 2,
            Error::Core(adaptermix_core::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}
