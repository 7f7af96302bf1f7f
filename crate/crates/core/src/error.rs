use std::path::PathBuf;

/// Errors raised anywhere in the watermarking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged in {stage} at step {step}: {detail}")]
    Training {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("tamper detected: {0}")]
    Tamper(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
