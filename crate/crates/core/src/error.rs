use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion failed for {source_id}: {message}")]
    Ingestion { source_id: String, message: String },

    #[error("protocol error in group {group}: {message}")]
    Protocol { group: u32, message: String },

    #[error("scoring failed for pair ({a}, {b}): {message}")]
    Scoring { a: String, b: String, message: String },

    #[error("stage `{stage}` requires the output of `{upstream}` ({detail})")]
    Prerequisite {
        stage: String,
        upstream: String,
        detail: String,
    },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("parameter layout mismatch:\n{0}")]
    Layout(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error("experiment directory is locked by {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
