use std::path::PathBuf;

use thiserror::Error;

use crate::experiment::RunLog;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("unsupported activation: {0}")]
    UnsupportedActivation(String),

    #[error("dense capacity exceeded: {params} parameters (cap {cap})")]
    Capacity { params: usize, cap: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("undefined direction: zero vector")]
    ZeroDirection,

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss {loss:e}")]
    Diverged {
        step: usize,
        loss: f64,
        partial: Box<RunLog>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
