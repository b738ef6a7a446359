use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid mix weights: {0}")]
    InvalidWeights(String),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: String },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("stencil selects no cells")]
    EmptyStencil,

    #[error("cannot {op} while session is {status}")]
    IllegalTransition { op: &'static str, status: String },

    #[error("unknown palette node {0}")]
    UnknownNode(u32),

    #[error("unknown mix group {0}")]
    UnknownGroup(u32),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend timed out")]
    Timeout,

    #[error("backend contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn out_of_range(what: &'static str, value: impl std::fmt::Display) -> Error {
    Error::OutOfRange {
        what,
        value: value.to_string(),
    }
}
