// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module.
//!
//! Each variant maps to one stable, machine-readable code (see [`Error::code`])
//! so that the command-line front end can name exactly one primary error per
//! failure.

use crate::model::ValidationReport;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The system file is not valid JSON or does not follow the schema.
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    /// The system parsed but violates a structural invariant.
    #[error("{0}")]
    Validation(ValidationReport),
    /// `builtin_case` was asked for a name it does not know.
    #[error("unknown built-in case `{0}`")]
    UnknownCase(String),
    /// Vector or matrix sizes disagree.
    #[error("{0}")]
    DimensionMismatch(String),
    /// No generation schedule serves the load within the line limits.
    #[error("{0}")]
    InfeasibleDispatch(String),
    /// The binding pattern is degenerate (a binding constraint with a zero
    /// multiplier), so derivatives are not defined by the reduced KKT system.
    #[error("{0}")]
    DegeneratePattern(String),
    /// The power network graph contains a cycle.
    #[error("{0}")]
    NotRadial(String),
    /// An equal-LMP or equal-cost property that must hold at an equilibrium
    /// is violated beyond tolerance.
    #[error("{0}")]
    Degeneracy(String),
    /// The flow/aggregate-flow coefficient matrix is (numerically) singular.
    #[error("{0}")]
    SingularM(String),
    /// An analysis was requested outside the assumptions it relies on.
    #[error("{0}")]
    Precondition(String),
    /// A sweep or box range is empty or otherwise unusable.
    #[error("{0}")]
    InvalidRange(String),
    /// A sweep CSV could not be interpreted.
    #[error("{0}")]
    MalformedCsv(String),
    /// The QP engine stopped without an optimal point (unbounded problem or
    /// iteration cap).
    #[error("{0}")]
    Solver(String),
}

impl Error {
    /// Stable error code, e.g. `"PARSE_ERROR"`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "PARSE_ERROR",
            Error::Validation(_) => "VALIDATION_ERROR",
            Error::UnknownCase(_) => "UNKNOWN_CASE",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::InfeasibleDispatch(_) => "INFEASIBLE_DISPATCH",
            Error::DegeneratePattern(_) => "DEGENERATE_PATTERN",
            Error::NotRadial(_) => "NOT_RADIAL",
            Error::Degeneracy(_) => "DEGENERACY",
            Error::SingularM(_) => "SINGULAR_M",
            Error::Precondition(_) => "PRECONDITION",
            Error::InvalidRange(_) => "INVALID_RANGE",
            Error::MalformedCsv(_) => "MALFORMED_CSV",
            Error::Solver(_) => "SOLVER_FAILURE",
        }
    }
}
