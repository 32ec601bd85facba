use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the harness can report.
///
/// Variants are grouped by the module that raises them; [`Error::category`]
/// collapses them into the coarse classes the CLI maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("manifest {0} declares no language splits")]
    ManifestEmpty(PathBuf),
    #[error("schema error in {location}: {message}")]
    SchemaError { location: String, message: String },
    #[error("declared label set {declared:?} differs from observed labels {observed:?}")]
    LabelMismatch {
        declared: Vec<String>,
        observed: Vec<String>,
    },
    #[error("single-label dataset has {count} labels at {location}")]
    SingleLabelViolation { location: String, count: usize },
    #[error("train/test overlap in language {lang}: {text:?}")]
    SplitOverlap { lang: String, text: String },

    // sampling
    #[error("cannot draw {k} shots per class from an empty split ({lang})")]
    EmptySplit { lang: String, k: usize },
    #[error("need {requested} context examples but the pool only has {available}")]
    NotEnoughExamples { requested: usize, available: usize },

    // prompting
    #[error("prompt has {tokens} tokens, limit is {max_tokens}")]
    OverlongPrompt { tokens: usize, max_tokens: usize },
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("invalid template: {0}")]
    TemplateError(String),

    // toymodel
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("bad model file: {0}")]
    ModelFormat(String),

    // backend
    #[error("backend timed out after {attempts} attempts")]
    BackendTimeout { attempts: usize },
    #[error("backend protocol error: {0}")]
    BackendProtocolError(String),
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: usize, last_error: String },
    #[error("generation failure rate {rate:.4} exceeds threshold {threshold:.4}")]
    FailureRateExceeded { rate: f64, threshold: f64 },

    // transfer
    #[error("invalid experiment spec: {0}")]
    SpecError(String),

    // metrics
    #[error("length mismatch: {gold} gold vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("source-language score must be positive, got {0}")]
    ZeroSource(f64),
    #[error("zero-shot baseline score must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    // synthlang
    #[error("invalid synthetic-language config: {0}")]
    ConfigError(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {location}: {source}")]
    Json {
        location: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Data,
    Backend,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::BackendTimeout { .. }
            | Error::BackendProtocolError(_)
            | Error::BackendUnavailable { .. }
            | Error::FailureRateExceeded { .. } => ErrorCategory::Backend,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(location: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            location: location.into(),
            source,
        }
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::SchemaError {
            location: location.into(),
            message: message.into(),
        }
    }
}
