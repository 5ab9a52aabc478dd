use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcamError {
    #[error("invalid image domain {height}x{width}: both sides must be at least 8")]
    InvalidDomain { height: usize, width: usize },

    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: i64,
        y_min: i64,
        x_max: i64,
        y_max: i64,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate label set: {0}")]
    DegenerateLabels(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("unknown target layer `{0}`")]
    UnknownLayer(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("frame index {t} outside shot {shot_id}")]
    FrameOutsideShot { t: usize, shot_id: String },

    #[error("no localizable region: map is flat")]
    NoLocalizableRegion,

    #[error("domain too small for CRF: {height}x{width} after downsampling")]
    CrfDomainTooSmall { height: usize, width: usize },

    #[error("missing prediction for annotated frame {0}")]
    MissingPrediction(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("corrupt array container: {0}")]
    CorruptContainer(String),

    #[error("array `{0}` not found in container")]
    ArrayNotFound(String),

    #[error("invalid dataset tree at {path}: {reason}")]
    InvalidDataset { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, TcamError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TcamError {
    let path = path.into();
    move |source| TcamError::Io { path, source }
}
