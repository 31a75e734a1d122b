use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("id {id} out of range for codebook of size {codebook_size}")]
    Range { id: u32, codebook_size: u32 },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("diffusion step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("stage {stage} requires the {missing} checkpoint")]
    Dependency { stage: String, missing: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed LIC payload: {0}")]
    Payload(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
