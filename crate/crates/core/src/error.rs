use std::path::PathBuf;

use thiserror::Error;
use zaplab_autograd::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("parameter snapshot mismatch: {0}")]
    Snapshot(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("cannot zap {requested} classes of a {classes}-class head")]
    ZapTooMany { requested: usize, classes: usize },
    #[error("gradients were computed without create_graph; they cannot carry a meta-gradient")]
    GradsWithoutGraph,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("cannot read image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: String,
        #[source]
        source: Box<Error>,
    },
    #[error("statistics: {0}")]
    Stats(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}
