use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    Numeric(String),

    /// An inconsistent model, sampler or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A container or annotation file that cannot be parsed.
    #[error("malformed file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    /// An annotation record that fails validation.
    #[error("invalid annotation at row {row}: {msg}")]
    Annotation { row: usize, msg: String },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad numerics.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Numeric(_))
    }
}
