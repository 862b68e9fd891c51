use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index (row, token id, speaker id) is out of range.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Layer norm over fewer than two features.
    DegenerateDimension { op: &'static str, dim: usize },
    /// Zero vector or empty sequence where a non-degenerate one is required.
    DegenerateInput(&'static str),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// The object is in the wrong state for the request (double insertion, ...).
    State(String),
    /// A configuration value is out of its valid range.
    Config { field: &'static str, reason: String },
    /// Not enough data to satisfy a frame budget.
    Budget { requested: usize, available: usize },
    /// Training produced a non-finite loss.
    Divergence { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::DegenerateDimension { op, dim } => {
                write!(f, "{op}: degenerate feature dimension {dim} (need at least 2)")
            }
            Error::DegenerateInput(what) => write!(f, "degenerate input: {what}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Config { field, reason } => write!(f, "invalid config field `{field}`: {reason}"),
            Error::Budget {
                requested,
                available,
            } => write!(
                f,
                "frame budget {requested} exceeds the {available} frames available"
            ),
            Error::Divergence { step } => write!(f, "training diverged at step {step} (non-finite loss)"),
        }
    }
}

impl core::error::Error for Error {}
