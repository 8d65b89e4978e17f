use std::path::PathBuf;

/// Errors produced anywhere in the generation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is smaller than the base alphabet plus specials ({minimum})")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("codebook index {index} out of range (K = {size})")]
    CodeOutOfRange { index: usize, size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dialogue: {0}")]
    Dialogue(String),
    #[error("{path}:{line}: schema violation at `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("metric input: {0}")]
    Metric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing corpus for stage {0}")]
    MissingCorpus(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
