use std::path::PathBuf;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input file does not follow the expected column layout.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Configuration is inconsistent or cannot produce a usable run.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Value outside the domain of a transform (e.g. Box-Cox of a non-positive value).
    #[error("numeric domain error: {0}")]
    Domain(String),

    /// Non-finite value encountered during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A persisted model could not be loaded.
    #[error("model load error: {0}")]
    Load(String),

    #[error("station set mismatch: {0}")]
    StationMismatch(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Validation(_) | Error::Config(_) | Error::StationMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
