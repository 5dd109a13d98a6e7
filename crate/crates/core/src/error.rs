use std::io;

/// Errors raised while decoding a tensor container or its manifest.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: dimensions overflow")]
    DimOverflow { name: String },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("non-finite entries in tensor {0:?}")]
    NonFinite(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("too few samples: p = {0}, need at least 2")]
    TooFewSamples(usize),
    #[error("non-finite entries in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("malformed document: {0}")]
    Document(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether this error is a validation failure (bad input) rather than
    /// a runtime or numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Numerical(_) | Error::Diverged { .. } | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
