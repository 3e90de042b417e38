use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("pixel value {value} at offset {offset} outside [-1, 1]")]
    PixelRange { offset: usize, value: f32 },

    #[error("watermark index {index} out of range [0, {num_watermarks})")]
    IndexOutOfRange { index: usize, num_watermarks: usize },

    #[error("uninitialized parameters: codec has not been trained or loaded")]
    Uninitialized,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (loss {loss}); recent losses: {trace:?}")]
    Diverged {
        epoch: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("diffusion step {t} out of range [0, {num_steps}]")]
    StepOutOfRange { t: usize, num_steps: usize },

    #[error("overlapping selectors: images {ids:?} match more than one rule")]
    OverlappingSelectors { ids: Vec<String> },

    #[error("plan resolution failed: {0}")]
    Plan(String),

    #[error("stale manifest: manifest fingerprint {manifest} does not match dataset {dataset}")]
    StaleManifest { manifest: String, dataset: String },

    #[error("dataset already carries marking from manifest {0}")]
    AlreadyMarked(String),

    #[error("mixed resolutions: {offenders:?} differ from {expected}")]
    MixedResolutions {
        expected: String,
        offenders: Vec<String>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("insufficient counts: {0}")]
    InsufficientCounts(String),

    #[error("empty contingency table")]
    EmptyTable,

    #[error("covariance square root residual {residual:e} exceeds tolerance")]
    MatrixSqrt { residual: f64 },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
