use thiserror::Error;

/// Errors produced by the tensor substrate, model stack, and pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numerical failure at sampler step {step}: state became non-finite")]
    SamplerDiverged { step: usize },

    #[error("attention mask eliminates every key")]
    EmptyAttention,

    #[error("invalid argument in {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            detail: detail.into(),
        }
    }
}
