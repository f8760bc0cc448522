use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("failed to load weights: {0}")]
    Load(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unrecognized dataset layout: {0}")]
    Layout(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("teacher pretraining failed: {0}")]
    Pretrain(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse failure classes; the CLI maps each class to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
    Metric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Load(_) => ErrorClass::Config,
            Error::Dimension(_) | Error::Dataset(_) | Error::Layout(_) | Error::Image(_) => {
                ErrorClass::Data
            }
            Error::Numeric(_) | Error::Diverged { .. } | Error::Pretrain(_) => ErrorClass::Training,
            Error::MetricUndefined(_) => ErrorClass::Metric,
            Error::File { .. } | Error::Io(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Training => 4,
            ErrorClass::Metric => 5,
            ErrorClass::Io => 6,
        }
    }
}
