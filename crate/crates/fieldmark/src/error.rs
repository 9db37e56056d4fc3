//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// No landmark of the support document matched any query region.
    #[error("no correspondence: no support landmark matched a query region")]
    NoCorrespondence,

    /// A value or argument violates a precondition (bad shape, bad label
    /// index, non-finite coordinate, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A document failed validation; the message names the offending region.
    #[error("invalid document `{doc_id}`: {reason}")]
    InvalidDocument { doc_id: String, reason: String },

    /// A dataset directory or manifest is malformed.
    #[error("dataset: {0}")]
    Dataset(String),

    /// A checkpoint file is corrupt, truncated, or of an unknown version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at iteration {0}")]
    Diverged(usize),

    /// A tensor op produced NaN or infinity; the payload names the op.
    #[error("numeric overflow: non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// The synthetic generator could not place a region on the page.
    #[error("synthesis: {0}")]
    Synthesis(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for an [`Error::InvalidInput`] with a formatted message.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
