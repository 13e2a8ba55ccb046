use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SolaError {
    #[error("shape mismatch: {left:?} vs {right:?} ({op})")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index {index} out of range (limit {limit}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("LoRA module {0} is frozen")]
    Frozen(usize),
    #[error("state error: {0}")]
    State(String),
    #[error("missing artifact {}: {what}", path.display())]
    MissingArtifact { path: PathBuf, what: &'static str },
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SolaError>;
