use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The closed-form field is singular at t = 1 and is only evaluated up to `1 - t_eps`.
    #[error("singularity: t = {t} exceeds the cap 1 - t_eps (t_eps = {t_eps})")]
    Singularity { t: f64, t_eps: f64 },

    #[error("enumeration too large: {size} terms exceeds the limit {limit}")]
    TooLarge { size: u128, limit: u128 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("integration blew up at step {step} (sample {sample})")]
    Blowup { step: usize, sample: usize },

    /// Wraps an error raised for one element of a batch.
    #[error("item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    /// The innermost error, looking through batch wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIndex { source, .. } => source.root(),
            other => other,
        }
    }
}
