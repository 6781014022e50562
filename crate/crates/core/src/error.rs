//! Error types shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch at {at}: expected {expected}, found {found}")]
    ShapeMismatch {
        at: String,
        expected: String,
        found: String,
    },
    #[error("unbound axis `{0}`")]
    UnboundAxis(String),
    #[error("convolution arithmetic: {0}")]
    ConvArithmetic(String),
    #[error("segment index {index} out of range (boundary has {len})")]
    SegmentOutOfRange { index: usize, len: usize },
    #[error("cell {0} is not linear")]
    NotLinear(String),
    #[error("cell {0} is not multilinear")]
    NotMultilinear(String),
    #[error("cell {0} is not differentiable")]
    NotDifferentiable(String),
    #[error("gradient pipeline requires a diagram ending in a single scalar segment")]
    NotScalarLoss,
    #[error("materialization of {0} elements exceeds the limit of {1}")]
    TooLarge(usize, usize),
    #[error("environment mismatch: {0}")]
    EnvMismatch(String),
    #[error("invalid axis move: {0}")]
    BadAxisMove(String),
    #[error("undefined name `{0}`")]
    UndefinedName(String),
    #[error("invalid diagram: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn mismatch(at: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            at: at.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
