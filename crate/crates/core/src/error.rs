use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: String,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("feature extraction error: {0}")]
    Feature(String),

    #[error("manifest error at row {row}: {detail}")]
    Manifest { row: usize, detail: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("objective error: {0}")]
    Objective(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("introspection error: {0}")]
    Introspection(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
