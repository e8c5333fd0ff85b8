use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infeasible sampling rate: acceleration {acceleration} needs {required} samples but the fully sampled centre already holds {center}")]
    InfeasibleRate {
        acceleration: f64,
        required: usize,
        center: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("context length mismatch: model expects {expected}, got {got}")]
    ContextLength { expected: usize, got: usize },

    #[error("model mode mismatch: expected {expected}, found {found}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
        /// Parameters from the last step that left everything finite.
        last_good: Box<crate::model::ReconModel>,
    },

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
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::NonFinite(_) => "non_finite",
            Error::InfeasibleRate { .. } => "infeasible_rate",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ContextLength { .. } => "context_length",
            Error::ModeMismatch { .. } => "mode_mismatch",
            Error::Format { .. } => "format",
            Error::MissingFile(_) => "missing_file",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
