use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum CodaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("annotation error in {source_name} ({location}): {detail}")]
    Annotation {
        source_name: String,
        location: String,
        detail: String,
    },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("image error for {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("non-finite {quantity} at {stage} step {step}{}", .dump.as_ref().map(|d| format!(" (state dumped to {})", d.display())).unwrap_or_default())]
    NonFinite {
        stage: &'static str,
        step: usize,
        quantity: String,
        dump: Option<PathBuf>,
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

impl CodaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CodaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CodaError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CodaError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config, data files)
    /// rather than by a failing computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            CodaError::Config { .. } | CodaError::Annotation { .. } | CodaError::Json(_)
        )
    }
}

pub type Result<T, E = CodaError> = std::result::Result<T, E>;
