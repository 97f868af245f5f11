use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: hi ({hi}) must exceed lo ({lo})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),

    #[error("insufficient points to fit a degree-{degree} curve: need {needed}, got {got}")]
    InsufficientPoints { degree: usize, needed: usize, got: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("volume {dims:?} smaller than the {window}-voxel window")]
    VolumeTooSmall { dims: [usize; 3], window: usize },

    #[error("overall score is undefined for an infinite PSNR")]
    UndefinedScore,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
