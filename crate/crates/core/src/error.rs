use std::fmt;

use thiserror::Error;

/// A modelling hypothesis that a run configuration can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// Metric coefficients must stay strictly positive (and smooth) on `[0, T]`.
    SmoothMetric,
    /// Bulk and boundary mass functions must be non-positive.
    NonPositiveMass,
    /// Nonlinear terms must satisfy the polynomial growth/Lipschitz bounds.
    Growth,
    /// Growth exponents must be at most half the critical Sobolev exponents.
    SubcriticalExponents,
}

impl Hypothesis {
    pub fn label(self) -> &'static str {
        match self {
            Hypothesis::SmoothMetric => "smooth positive metric",
            Hypothesis::NonPositiveMass => "non-positive masses",
            Hypothesis::Growth => "nonlinear growth bounds",
            Hypothesis::SubcriticalExponents => "subcritical exponents",
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub hypothesis: Hypothesis,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.hypothesis, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("non-positive metric coefficient {name} = {value:e} at t = {t}, x = {x}, theta = {theta}")]
    NonPositiveMetric {
        name: &'static str,
        value: f64,
        t: f64,
        x: f64,
        theta: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("dense computation needs {dofs} dofs, cap is {cap}")]
    CapExceeded { dofs: usize, cap: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last sup-diff {last_diff:e}, ratio {last_ratio})")]
    NotConverged {
        iterations: usize,
        last_diff: f64,
        last_ratio: f64,
    },

    #[error("missing declared constant: {0}")]
    MissingConstant(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("hypothesis violation:{}", fmt_violations(.0))]
    Hypothesis(Vec<Violation>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("\n  {v}")).collect()
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Expr(_) | Error::Io(_) => 1,
            Error::Hypothesis(_) | Error::NonPositiveMetric { .. } => 2,
            _ => 3,
        }
    }

    /// True for errors that signal a diverging solution rather than a bug or bad input.
    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
