use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor was built with inconsistent counts.
    Shape(String),
    /// A value in a tensor is NaN or infinite.
    NonFinite { index: usize },
    /// An argument is outside its accepted range.
    Parameter(String),
    /// Fewer than two mergeable tokens.
    NothingToPartition { length: usize, l_spec: usize },
    /// Inputs do not belong together (plan built for another tensor, ...).
    Contract(String),
    /// A fusion state violates one of its invariants.
    State(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite { index } => write!(f, "non-finite value at element {index}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::NothingToPartition { length, l_spec } => write!(
                f,
                "nothing to partition: length {length} with {l_spec} special tokens leaves fewer than 2 mergeable tokens"
            ),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
