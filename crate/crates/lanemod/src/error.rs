//! Shared error type for all fallible operations in the crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by geometry, matching, loss, and evaluation routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated (shape mismatch, bad
    /// range, non-finite input, ...).
    InvalidArgument(String),
    /// A polyline's chord (start to end) is shorter than the degeneracy
    /// guard, so the straightness ratio is undefined.
    DegenerateChord,
    /// Same as [`Error::DegenerateChord`], raised from a bank-level
    /// operation; carries the index of the offending proposal.
    DegenerateProposal { index: usize },
    /// A statistic has no defined value on this input (e.g. the confidence
    /// gap of a label-free scene).
    UndefinedStatistic(&'static str),
    /// A function under finite-difference check returned a non-finite value
    /// while perturbing the given coordinate.
    NonFiniteEval { coordinate: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(what) => write!(f, "invalid argument: {what}"),
            Error::DegenerateChord => {
                write!(f, "degenerate lane: start and end points coincide")
            }
            Error::DegenerateProposal { index } => {
                write!(f, "degenerate lane at proposal {index}: start and end points coincide")
            }
            Error::UndefinedStatistic(what) => write!(f, "undefined statistic: {what}"),
            Error::NonFiniteEval { coordinate } => {
                write!(f, "non-finite evaluation while perturbing coordinate {coordinate}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(what: impl fmt::Display) -> Error {
    Error::InvalidArgument(alloc::format!("{what}"))
}
