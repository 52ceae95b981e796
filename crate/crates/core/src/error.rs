use std::path::PathBuf;

/// Errors raised anywhere in the enhancement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{axis} = {size} is not divisible by the {ratio_name} ratio {ratio}")]
    Indivisible {
        axis: &'static str,
        size: usize,
        ratio_name: &'static str,
        ratio: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("code index {index} at cell {cell:?} is out of range for a codebook of {size} items")]
    IndexOutOfRange {
        cell: [usize; 4],
        index: u32,
        size: usize,
    },

    #[error(
        "sequence length {got} differs from the {expected} learned position embeddings; \
         inputs must have the same resolution and clip length as the training videos"
    )]
    SequenceLength { expected: usize, got: usize },

    #[error("non-finite loss during training: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("external tool failed: {0}")]
    External(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
