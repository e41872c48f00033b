use std::path::PathBuf;

/// Coarse failure classes; the CLI maps each to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
    Leakage,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("output directory {0} already exists (pass overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("leakage guard: {count} test ids also appear in train/validation (first: {first})")]
    Leakage { count: usize, first: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Backend(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorCategory::Config,
            Error::Divergence { .. } => ErrorCategory::Divergence,
            Error::Leakage { .. } => ErrorCategory::Leakage,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
