use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("simulation error in layer {layer} at step {step}: {reason}")]
    Simulation {
        layer: usize,
        step: usize,
        reason: String,
    },

    #[error("conversion failed: {0}")]
    Conversion(String),

    #[error("degenerate threshold in layer {layer}: theta = {theta:e}")]
    DegenerateThreshold { layer: usize, theta: f64 },

    #[error("K is undefined when the reference rate vector is all zero")]
    UndefinedK,

    #[error("omega is undefined for an all-zero rate vector")]
    UndefinedOmega,

    #[error("format error: {0}")]
    Format(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure was caused by user input (bad config, missing
    /// files, malformed data) rather than by the numerics.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_) | Error::Config(_) | Error::Format(_) | Error::Json(_)
        )
    }
}
