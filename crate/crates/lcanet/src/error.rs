use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Crop box does not intersect the image after clamping.
    #[error("bounding box lies outside the image")]
    BoxOutOfImage,

    /// Ground-truth mask has no positive pixel; F-measure is undefined.
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,

    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed binary payload (.ten, checkpoint, PPM/PGM).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
