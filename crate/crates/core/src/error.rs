use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraint.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("manifest shortfall: {0}")]
    Shortfall(String),

    #[error("insufficient samples: need {need} ({calib} calibration + {eval} evaluation), have {have}")]
    InsufficientSamples {
        need: usize,
        have: usize,
        calib: usize,
        eval: usize,
    },

    #[error("no records")]
    NoRecords,

    #[error("location not present in stream: {0}")]
    MissingLocation(String),

    /// An internal consistency check failed; this is a bug, not bad input.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    /// True for errors caused by an internal bug rather than by user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
