use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bin {bin} out of range for {n_bins} bins")]
    BinOutOfRange { bin: usize, n_bins: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid distribution: {0}")]
    Simplex(String),

    #[error("observation has zero likelihood under every preference")]
    DegenerateEvidence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BinOutOfRange { .. } => "range",
            Error::Parameter(_) => "parameter",
            Error::Simplex(_) => "simplex",
            Error::DegenerateEvidence => "degenerate_evidence",
            Error::Shape(_) => "shape",
            Error::Training(_) => "training",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
