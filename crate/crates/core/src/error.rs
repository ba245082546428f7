use thiserror::Error;

/// Errors raised by case loading, equilibrium solvers, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    /// A structural invariant failed; `field` and `index` point at the culprit.
    #[error("invalid {field}[{index}]: {reason}")]
    Invariant {
        field: &'static str,
        index: String,
        reason: String,
    },

    #[error("bisection bracket could not be expanded around the frequency balance (is the controller monotone?)")]
    BracketExpansion,

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("power flow infeasible: {0}")]
    Infeasible(String),

    #[error("equilibrium leaves the angle domain on edge ({i}, {j}): |delta_ij| = {diff:.6} >= pi/2")]
    AngleDomain { i: usize, j: usize, diff: f64 },

    #[error("no epsilon in the search range validates Q(delta) > 0 (worst lambda_min {worst_lambda:.3e})")]
    NoValidEpsilon { worst_lambda: f64 },

    #[error("target samples are not monotone non-decreasing near x = {x}")]
    NonMonotoneTarget { x: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("every rollout diverged in episode {episode}")]
    PersistentDivergence { episode: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invariant(field: &'static str, index: impl ToString, reason: impl Into<String>) -> Error {
    Error::Invariant {
        field,
        index: index.to_string(),
        reason: reason.into(),
    }
}
