// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::io;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed bundle bytes.
    #[error("format error: {0}")]
    Format(String),

    /// A required bundle entry or manifest field is missing.
    #[error("schema error: {0}")]
    Schema(String),

    /// Well-formed input whose contents violate a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// An index (class, latent, sample) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration (grid, hyperparameters).
    #[error("config error: {0}")]
    Config(String),

    /// Rank-one update requested with a zero key.
    #[error("degenerate key: squared norm is zero")]
    DegenerateKey,

    /// A numerical procedure produced no usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training failure tagged with the seed that produced it.
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad input data or files, as opposed to
    /// numerical failures.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) => true,
            Error::Seed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
