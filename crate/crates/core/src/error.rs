use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate foreground embedding (norm {norm:e} <= {eps:e})")]
    DegenerateForeground { norm: f64, eps: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("adapter parameters contain non-finite values")]
    NonFiniteParameters,

    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite latent or conditioning: {0}")]
    NonFiniteLatent(String),

    #[error("encoder space mismatch: {0}")]
    EncoderSpaceMismatch(String),

    #[error("format version mismatch: {0}")]
    FormatVersionMismatch(String),

    #[error("layer shape mismatch: {0}")]
    LayerShapeMismatch(String),

    #[error("weights not loaded: {0}")]
    WeightsNotLoaded(String),

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("mask shape {mask:?} does not match image shape {image:?}")]
    MaskShapeMismatch { mask: (u32, u32), image: (u32, u32) },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("out of memory at resolution {width}x{height}")]
    OutOfMemory { width: u32, height: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Short machine-readable reason, used in API and CLI error payloads.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateForeground { .. } => "degenerate_foreground",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteParameters => "non_finite_parameters",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteLatent(_) => "non_finite_latent",
            Error::EncoderSpaceMismatch(_) => "encoder_space_mismatch",
            Error::FormatVersionMismatch(_) => "format_version_mismatch",
            Error::LayerShapeMismatch(_) => "layer_shape_mismatch",
            Error::WeightsNotLoaded(_) => "weights_not_loaded",
            Error::ImageDecode(_) => "image_decode_error",
            Error::InvalidRequest(_) => "invalid_request",
            Error::MaskShapeMismatch { .. } => "mask_shape_mismatch",
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::OutOfMemory { .. } => "out_of_memory",
            Error::Config(_) => "invalid_config",
            Error::Dataset(_) => "dataset_error",
            Error::Metric(_) => "metric_error",
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
        }
    }
}
