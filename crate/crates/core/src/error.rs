use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("persistence error: {0}")]
    Persistence(String),

    /// A loss term became non-finite during training.
    #[error("non-finite {term} loss ({value}) at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        value: f64,
        epoch: usize,
        batch: usize,
    },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
