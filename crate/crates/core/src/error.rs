use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("point ({x}, {y}) lies outside the image or box")]
    PointOutside { x: f64, y: f64 },
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("unknown category {0:?}")]
    Vocabulary(String),
    #[error("refinement failed: {0}")]
    RefinementFailure(String),
    #[error("tracker init failed: {0}")]
    TrackerInit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report error: {0}")]
    Report(String),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
