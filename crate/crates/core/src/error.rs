use std::fmt;

/// Errors raised anywhere in the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value left the finite range (NaN or infinity).
    NonFinite(&'static str),
    /// An input fell outside the domain of an operation (ln of a non-positive
    /// entry, non-positive variance, a vector that is not a distribution).
    Domain(String),
    /// Invalid argument or configuration, naming what was wrong.
    Invalid(String),
    /// Energy or gradient became non-finite during training.
    Divergence(String),
    /// Malformed file contents (dataset, checkpoint, config).
    Format(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite(op) => write!(f, "non-finite value produced by {op}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Divergence(msg) => write!(f, "divergence: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
