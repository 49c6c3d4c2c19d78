use thiserror::Error;

/// Errors raised across the planning, simulation and learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid framework: {0}")]
    InvalidFramework(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("environment generation failed after {0} rejection iterations")]
    EnvironmentGeneration(usize),
    #[error("vertex {0} has no neighbors")]
    IsolatedVertex(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss at step {step} (parameter {param})")]
    NonFiniteLoss { step: usize, param: String },
    #[error("non-finite value during sampling at diffusion step {0}")]
    NonFiniteSample(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
