use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("backbone is frozen; parameters cannot be modified")]
    Frozen,
    #[error("layer {0} is not available")]
    MissingLayer(usize),
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("input is empty")]
    EmptyInput,
    #[error("group {0} has no samples")]
    EmptyGroup(usize),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("reference set has zero spread (all points identical)")]
    DegenerateReference,
    #[error("class means {0} and {1} coincide")]
    DegenerateMeans(usize, usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
