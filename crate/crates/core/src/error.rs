use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario code {0} (expected 0..=4)")]
    InvalidScenarioCode(i64),

    #[error("unknown scenario tag {0:?}")]
    UnknownScenario(String),

    #[error(
        "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: corners must be finite and ordered"
    )]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),

    #[error("density map must be at least 1x1 with height*width values (got {height}x{width}, {len} values)")]
    InvalidDensityShape {
        height: usize,
        width: usize,
        len: usize,
    },

    #[error("density map contains a non-finite value at row {row}, column {col}")]
    NonFiniteDensity { row: usize, col: usize },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown annotation type {0:?}")]
    UnknownAnnotation(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),

    #[error("manifest {0:?} is empty: no statistics")]
    EmptyManifest(String),

    #[error("cannot split a manifest of {0} samples (need at least 2)")]
    TooFewSamples(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: {left} ground-truth values vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("metrics need at least one sample")]
    NoSamples,

    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),

    #[error("backend contract violated: {0}")]
    Contract(String),

    #[error("{backend}: expected {what} {expected}, found {found}")]
    ShapeMismatch {
        backend: String,
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("inference failed in {backend}: {message}")]
    Inference { backend: String, message: String },

    #[error("stub backend has no ground truth for frame {0:?}")]
    MissingTruth(String),

    #[error("frame {0:?} carries no decodable image")]
    MissingImage(String),

    #[error("image has zero width or height")]
    EmptyImage,

    #[error("routing table: {0}")]
    Routing(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
