use thiserror::Error;

use stformer_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("horizon error: {0}")]
    Horizon(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("diffusion step {step} outside 1..={max}")]
    Step { step: usize, max: usize },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("rate is undefined over an empty set")]
    UndefinedRate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
