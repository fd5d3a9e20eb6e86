use std::path::PathBuf;
use thiserror::Error;

/// Everything that can go wrong between the command line and the numeric
/// core. Variants carry enough context to print a one-line, named message.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no supported images under {0}")]
    EmptyCorpus(PathBuf),
    #[error("too few images: the {class} class has {n}, folds need at least 10")]
    TooFewImages { class: String, n: usize },
    #[error("no counterpart for {0}")]
    Pairing(String),
    #[error("checkpoint phase is \"{found}\", expected \"{expected}\"")]
    Phase { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] catintell_core::CoreError),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    /// Wraps a raw I/O error with the path it happened at.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }
}
