use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("singular ridge system in layer {layer}: {reason}")]
    Singular { layer: String, reason: String },

    #[error("algorithm violation in layer {layer}: {reason}")]
    AlgorithmViolation { layer: String, reason: String },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ (Error::Singular { .. } | Error::AlgorithmViolation { .. } | Error::Layer { .. }) => e,
            other => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Short machine-readable class of the error.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidDistribution(_) | Error::Shape(_) | Error::Index(_) | Error::Domain(_) | Error::Numeric(_) => {
                "data"
            }
            Error::Config(_) => "config",
            Error::Format { .. } | Error::Json { .. } => "format",
            Error::Io { .. } => "io",
            Error::Structural(_) => "structure",
            Error::Singular { .. } | Error::AlgorithmViolation { .. } => "solver",
            Error::Layer { source, .. } => source.category(),
        }
    }

    /// True for failures that indicate a solver defect or an unsolvable
    /// system rather than bad input data.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::Singular { .. } | Error::AlgorithmViolation { .. } => true,
            Error::Layer { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
