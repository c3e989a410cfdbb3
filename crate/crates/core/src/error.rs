use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0} (expected 1..=4)")]
    BadRank(usize),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes: {0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no labeled pixels in mini-batch")]
    NoLabeledPixels,
    #[error("no foreground pixels")]
    NoForeground,
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Stable short identifier, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "bad_version",
            Error::UnsupportedDtype(_) => "bad_dtype",
            Error::BadRank(_) => "bad_rank",
            Error::Truncated { .. } => "truncated",
            Error::TrailingBytes(_) => "trailing_bytes",
            Error::NonFinite(_) => "non_finite",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::NoLabeledPixels => "no_labeled_pixels",
            Error::NoForeground => "no_foreground",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    /// Validation failures are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_) | Error::Parse { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
