use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DdclError>;

#[derive(Debug, Error)]
pub enum DdclError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("forward cache is stale (cached version {cached}, embedder version {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt or malformed file: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DdclError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DdclError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdclError::Io {
            path: path.into(),
            source,
        }
    }
}
