use crate::ensemble::EnsembleError;
use crate::sde::SdeError;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {expected} Brownian paths, got {got}")]
    PathCount { expected: usize, got: usize },
    #[error("truth generation failed: {0}")]
    Truth(SdeError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("malformed record file: {0}")]
    Parse(String),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;
