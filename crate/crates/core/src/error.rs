use std::path::PathBuf;

/// Errors produced by the deraining library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("image is {height}x{width}, at least {min}x{min} is required")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("crop of {size}px does not fit a {height}x{width} image")]
    CropTooLarge { size: usize, height: usize, width: usize },

    #[error("{what} ({value}) is not divisible by {factor}")]
    NotDivisible { what: String, value: usize, factor: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown loss kind `{0}`")]
    UnknownLoss(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("route index {index} is invalid for {n_subnets} sub-networks")]
    InvalidRoute { index: usize, n_subnets: usize },

    #[error("vision-language weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("prompt set hash mismatch: checkpoint has {expected}, got {got}")]
    PromptSetMismatch { expected: String, got: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
