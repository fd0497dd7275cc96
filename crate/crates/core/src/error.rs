use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input contains NaN or Inf")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config validation failed: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),

    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing split directory {0}")]
    MissingSplit(PathBuf),

    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),

    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("pixel value {value} outside [0, 1]")]
    PixelRange { value: f64 },

    #[error("mask ratio {ratio} over {patches} patches masks {masked}; need at least one masked and one visible patch")]
    DegenerateMask {
        ratio: f64,
        patches: usize,
        masked: usize,
    },

    #[error("AUROC needs both classes present")]
    SingleClass,

    #[error("no gradient for parameter {0}")]
    MissingGrad(String),

    #[error("non-finite loss at step {step} (lr {lr:e}): {detail}")]
    NanLoss { step: usize, lr: f64, detail: String },

    #[error("missing layer {layer}: model has {depth} layers")]
    MissingLayer { layer: usize, depth: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::GraphConsumed => "graph_consumed",
            Error::Dimension(_) => "dimension",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Validation(_) => "config_validation",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingSplit(_) => "missing_split",
            Error::EmptyClass(_) => "empty_class",
            Error::Image { .. } => "image",
            Error::PixelRange { .. } => "pixel_range",
            Error::DegenerateMask { .. } => "degenerate_mask",
            Error::SingleClass => "single_class",
            Error::MissingGrad(_) => "missing_grad",
            Error::NanLoss { .. } => "nan_loss",
            Error::MissingLayer { .. } => "missing_layer",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

/// One violated config constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub fields: Vec<String>,
    pub message: String,
}

impl Violation {
    pub fn new(fields: &[&str], message: impl Into<String>) -> Self {
        Violation {
            fields: fields.iter().map(|f| f.to_string()).collect(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.fields.join(","), self.message)
    }
}
