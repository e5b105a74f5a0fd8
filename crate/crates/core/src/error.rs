use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing mask for spliced sample `{0}`")]
    MissingMask(String),

    #[error("failed to load sample `{id}`: {reason}")]
    Load { id: String, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFinite { epoch: usize, batch: usize },

    #[error("AUC is undefined: scores contain a single class")]
    SingleClass,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
