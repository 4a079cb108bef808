use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN, infinity, or an all-masked attention row where one is not allowed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Class index or progression label outside its valid set.
    #[error("label error: {0}")]
    Label(String),

    /// Metric has no defined value for the given input (e.g. AUROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line} (byte offset {offset}): {message}")]
    Parse {
        line: usize,
        offset: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for failures the CLI reports with the numeric exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
