use thiserror::Error;

use crate::synthworld::AttributeCategory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pose out of range: {0}")]
    PoseOutOfRange(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no transferable attribute present in video")]
    NoTransferableAttribute,
    #[error("attribute {0:?} is absent")]
    AttributeAbsent(AttributeCategory),
    #[error("attribute region is empty in every frame")]
    AttributeMissing,
    #[error("face region is empty")]
    EmptyFaceRegion,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
