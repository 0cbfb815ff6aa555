use thiserror::Error;

/// Errors raised by the popflow library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model parameters: {0}")]
    InvalidModel(String),

    #[error("rate bound violated: {what} = {value} exceeds declared bound {bound}")]
    BoundViolation {
        what: String,
        value: f64,
        bound: f64,
    },

    #[error("truncation deficit {deficit:e} exceeds tolerance {tolerance:e}")]
    Truncation { deficit: f64, tolerance: f64 },

    #[error("negative value {value:e} at index {index} (t = {time})")]
    Negativity { time: f64, index: usize, value: f64 },

    #[error("non-finite value encountered at t = {time}")]
    NonFinite { time: f64 },

    #[error("absolute continuity fails: {0}")]
    AbsoluteContinuity(String),

    #[error("step size underflow at t = {time}")]
    StepUnderflow { time: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
