use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A CSV row that could not be parsed. `row` is the 1-based line in the file.
    #[error("parse error at row {row}: {message}")]
    Parse { row: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("singular transform: {0}")]
    Singular(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite gradient for `{param}` (grad norm {norm})")]
    NonFiniteGradient { param: String, norm: f64 },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
