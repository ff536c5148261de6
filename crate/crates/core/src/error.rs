use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed {kind} at byte {pos}: {msg}")]
    Format {
        kind: &'static str,
        pos: usize,
        msg: String,
    },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("config hash mismatch: stream {stream:08x}, model {model:08x}")]
    ConfigMismatch { stream: u32, model: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach the offending path to an I/O failure.
    pub fn at_path(path: &std::path::Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Stable machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Format { .. } => "format",
            Error::Truncated(_) => "truncated",
            Error::Corrupt(_) => "corrupt",
            Error::Checksum { .. } => "checksum",
            Error::ConfigMismatch { .. } => "config-mismatch",
            Error::Io(_) => "io",
        }
    }
}
