use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input raster or array has the wrong layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// One or more config keys failed validation; the list names every offender.
    #[error("config validation failed for keys: {}", .keys.join(", "))]
    ConfigKeys { keys: Vec<String>, details: Vec<String> },

    #[error("parse error in {file} line {line}, field `{field}`: {message}")]
    Parse {
        file: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("NaN loss in stream `{stream}` at stage {stage}")]
    NanLoss { stream: String, stage: usize },

    #[error("checkpoint integrity error: missing array for parameter `{0}`")]
    MissingParameter(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported checkpoint version: {0}")]
    Version(String),

    #[error("config hash mismatch on resume; differing keys: {}", .diff.join("; "))]
    ConfigMismatch { diff: Vec<String> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Precondition(_) => "precondition",
            Error::Argument(_) => "argument",
            Error::Config(_) | Error::ConfigKeys { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Domain(_) => "domain",
            Error::NanLoss { .. } => "nan_loss",
            Error::MissingParameter(_) => "integrity",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Version(_) => "version",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
