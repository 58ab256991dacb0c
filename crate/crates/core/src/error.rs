//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the primitive's signature.
    #[error("shape mismatch in `{kind}`: {detail}")]
    ShapeMismatch { kind: &'static str, detail: String },

    /// Input values fall outside a primitive's documented domain.
    #[error("domain error in `{kind}`: {detail}")]
    Domain { kind: &'static str, detail: String },

    /// Caller violated an API contract (lengths, vocabulary, arch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// No CTC alignment of the label sequence fits in the given frames.
    #[error("infeasible alignment: {frames} frames cannot carry {needed} alignment slots")]
    InfeasibleAlignment { frames: usize, needed: usize },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed file content (WAV chunk, checkpoint, manifest line, ...).
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    /// Distortion is undefined for an all-zero signal.
    #[error("undefined distortion: {0} signal has zero peak amplitude")]
    UndefinedDistortion(&'static str),

    /// Training diverged (non-finite loss).
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
