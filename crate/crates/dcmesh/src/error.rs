//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Structural problem with a network or scenario description.
    #[error("configuration error: {0}")]
    Config(String),

    /// A physical parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Constant-power load evaluated at or below its voltage cutoff.
    #[error("load singularity: v = {v} V is at or below the cutoff {cutoff} V")]
    Singularity { v: f64, cutoff: f64 },

    /// Argument outside the domain of a mathematical map.
    #[error("domain error: {0}")]
    Domain(String),

    /// Newton iterations did not converge from any start point.
    #[error("equilibrium not found; best residual history {residuals:?}")]
    EquilibriumNotFound { residuals: Vec<f64> },

    /// No admissible point satisfies the named constraint.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The terminal control problem has an empty feasible set.
    #[error("terminal set violation: {0}")]
    TerminalSet(String),

    /// The integrator produced a non-finite state.
    #[error("integration diverged at t = {t} s")]
    Divergence { t: f64, last_finite: Vec<f64> },

    /// A numerical routine reported failure.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Scenario file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
