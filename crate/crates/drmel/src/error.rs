use std::io;

use thiserror::Error;

/// Errors produced by modelling, solving, and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("population {0} missing: population indices must cover 0..=m with no gaps")]
    MissingPopulation(usize),
    #[error("population {0} has no observations")]
    EmptyPopulation(usize),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("basis component {component} is undefined at x = {x}")]
    Domain { component: String, x: f64 },
    #[error("invalid quantile spec: {0}")]
    InvalidSpec(String),
    #[error(
        "hypothesized quantile {value} for population {population} lies outside the open \
         sample range ({lo}, {hi}); the hypothesis is untestable with this data"
    )]
    OutOfRange {
        population: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("basis moment matrix is not positive definite: {0}")]
    IllConditionedBasis(String),
    #[error("solver failed: {0}")]
    SolverFailure(String),
    #[error("Jacobian is singular after regularization attempts")]
    SingularJacobian,
    #[error("no feasible step within {0} halvings")]
    FeasibilityLost(usize),
    #[error("bisection bracket not found after {0} doublings")]
    BracketNotFound(usize),
    #[error("dual point is infeasible: a weight denominator is non-positive")]
    InfeasiblePoint,
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("{failed} of {total} {what} failed; limit is {limit_percent}%")]
    TooManyFailures {
        what: &'static str,
        failed: usize,
        total: usize,
        limit_percent: f64,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    /// Process exit code for CLI front ends: 2 for input/validation
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::MissingPopulation(_)
            | Error::EmptyPopulation(_)
            | Error::InvalidBasis(_)
            | Error::Domain { .. }
            | Error::InvalidSpec(_)
            | Error::OutOfRange { .. }
            | Error::DegenerateSample(_)
            | Error::InvalidArgument(_) => 2,
            Error::IllConditionedBasis(_)
            | Error::SolverFailure(_)
            | Error::SingularJacobian
            | Error::FeasibilityLost(_)
            | Error::BracketNotFound(_)
            | Error::InfeasiblePoint
            | Error::TooManyFailures { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
