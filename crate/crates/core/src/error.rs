use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OreoError>;

#[derive(Debug, Error)]
pub enum OreoError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("linking error: {0}")]
    Linking(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl OreoError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        OreoError::Shape(msg.into())
    }

    /// Whether the failure came from non-finite numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, OreoError::Numerical(_))
    }
}
