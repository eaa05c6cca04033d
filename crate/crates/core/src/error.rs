use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("checksum mismatch for {}: expected {expected}, got {actual}", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch ({what}): expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("hash mismatch for {what}: expected {expected}, found {actual}")]
    HashMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("no results: {0}")]
    NoResults(String),

    #[error("download failed: {0}")]
    Download(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
