use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters, schedule ranges, loss weights, etc.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller broke an operation's precondition (timestep out of range,
    /// non-scalar loss, etc.).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Loss or activations went non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: String,
        expected: String,
        found: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}
