use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps to a stable category string (see [`Error::category`])
/// that the command-line driver prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Capacity(_) => "capacity",
            Error::Split(_) => "split",
            Error::Parameter(_) => "parameter",
            Error::Training { .. } => "training",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
