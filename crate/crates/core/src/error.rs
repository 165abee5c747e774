use std::path::Path;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Config` -> 2, `Data` -> 3, `Numeric` -> 4, `Io`/`Format` -> 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric abort: {detail} (epoch {epoch}, batch {batch}, stream {stream})")]
    Numeric {
        epoch: usize,
        batch: usize,
        stream: String,
        detail: String,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
