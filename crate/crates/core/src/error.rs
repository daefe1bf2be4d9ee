use std::fmt;

use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("capacity error: dense materialization needs {required} entries, cap is {cap}")]
    Capacity { required: usize, cap: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
