use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = XfrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum XfrError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("network validation error at layer {layer}: {reason}")]
    Validation { layer: usize, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),

    #[error("degenerate triplet prior")]
    DegeneratePrior,

    #[error("degenerate sampling prior")]
    DegenerateSamplingPrior,

    #[error("triplet already satisfied; no explanation signal")]
    InactiveHinge,

    #[error("no nodes with a positive gradient score")]
    NoScoredNodes,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient impostor pairs: need at least {required}, got {actual}")]
    InsufficientPairs { required: usize, actual: usize },

    #[error("degenerate training manifest: {0}")]
    DegenerateManifest(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing saliency maps for triplets: {0:?}")]
    MissingMaps(Vec<String>),

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl XfrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XfrError::Io {
            path: path.into(),
            source,
        }
    }
}
