use thiserror::Error;

/// Errors raised by the simulation, reconstruction and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("negative measurement {value} at index {index}")]
    NegativeMeasurement { index: usize, value: f64 },

    #[error("reconstruction diverged after {} iterations", trace.len())]
    Diverged { trace: Vec<f64> },

    #[error("non-finite cost at theta = {theta:?}")]
    NonFiniteCost { theta: Vec<f64> },

    #[error("detected {found} blobs, expected {expected}; centroids: {centroids:?}")]
    BlobDetection {
        expected: usize,
        found: usize,
        centroids: Vec<(f64, f64)>,
    },

    #[error("singular model: {0}")]
    SingularModel(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("campaign failed: {failed} of {total} trials failed")]
    CampaignFailed { failed: usize, total: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
