use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("numeric fault in layer {layer}: {source}")]
    NumericFault { layer: usize, source: Box<Error> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("episode {episode}, step {step}: {source}")]
    Training {
        episode: usize,
        step: usize,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
