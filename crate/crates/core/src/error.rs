use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("flat model: dimension {axis} has zero extent")]
    FlatModel { axis: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate 6D rotation: columns are parallel or zero")]
    DegenerateRotation,

    #[error("zero-area frame ({width}x{height})")]
    EmptyFrame { width: usize, height: usize },

    #[error("depth {depth} does not fit in 16 bits at scale {scale}")]
    DepthOverflow { depth: f64, scale: f64 },

    #[error("insufficient correspondences: found {found}, need at least {needed}")]
    InsufficientCorrespondences { found: usize, needed: usize },

    #[error("bounding box does not intersect the image")]
    BBoxOutsideImage,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("no consensus: best hypothesis had {best} inliers, need {needed}")]
    NoConsensus { best: usize, needed: usize },

    #[error("no point associations within the correspondence distance")]
    NoAssociations,

    #[error("every reference-frame candidate is degenerate")]
    AllCandidatesDegenerate,

    #[error("probabilities are not normalized at pixel {pixel}, dimension {dim} (sum {sum})")]
    UnnormalizedProbabilities { pixel: usize, dim: usize, sum: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("depth map has no valid pixels")]
    AllHoles,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
