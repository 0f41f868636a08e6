//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index out of range: {detail}")]
    Bounds { detail: String },

    #[error("softmax row {row} has no allowed positions (malformed mask)")]
    DegenerateRow { row: usize },

    #[error("empty loss mask: no positions contribute to the loss")]
    DegenerateBatch,

    #[error("capacity exceeded: {detail}")]
    Capacity { detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid task spec: {0}")]
    TaskSpec(String),

    #[error("training diverged at step {step}: loss {loss:.4} > {limit:.4} for {window} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        limit: f64,
        window: usize,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("golden mismatch in {case}: {fields:?}")]
    GoldenMismatch { case: String, fields: Vec<String> },

    #[error("missing baseline report: {0}")]
    MissingBaseline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
