use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("class index {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// A target class carries mass where the prediction is exactly zero.
    #[error("infinite loss: class {class} has target mass but zero predicted probability")]
    InfiniteLoss { class: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("unsupported format: {0}")]
    Version(String),

    #[error("sweep cell {cell}: {source}")]
    Sweep {
        cell: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The underlying error with sweep-cell labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sweep { source, .. } => source.root(),
            other => other,
        }
    }
}
