use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("empty support: {0}")]
    EmptySupport(&'static str),
    #[error("vocabulary error: id {id} out of range for vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate batch: normalization over {0} values in train mode")]
    DegenerateBatch(usize),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("feature kind error: expected {expected} features")]
    Kind { expected: &'static str },
    #[error("missing conditioning vector for conditional batch normalization")]
    MissingConditioning,
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("length error: sentence of {len} tokens exceeds cap {cap}")]
    Length { len: usize, cap: usize },
    #[error("size error: {0}")]
    Size(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("function is not deterministic: two evaluations at the same point differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
