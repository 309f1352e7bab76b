use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmdcError>;

#[derive(Debug, Error)]
pub enum HmdcError {
    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite {component} at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("artifact integrity error: {0}")]
    Integrity(String),

    #[error("unsupported {what}: {value}")]
    Unsupported { what: String, value: String },

    #[error("{0}")]
    Other(String),
}

impl HmdcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HmdcError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HmdcError::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
