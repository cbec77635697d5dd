//! Error taxonomy shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: scenario and
//! input problems (`Parse`, `Io`), model admissibility problems (`Domain`,
//! `Validation`), and numerical run failures (`Convergence`, `Stability`,
//! `Horizon`, `CapExceeded`, `Unreliable`).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed scenario file or incompatible schema version.
    #[error("parse error: {0}")]
    Parse(String),

    /// Filesystem problem while reading inputs or writing outputs.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// An argument is outside the domain an operation is defined on
    /// (position outside the window, a non-probability value, lambda <= 1, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A model-level admissibility check failed (death-bound margin,
    /// dispersal normalization, grid layout, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Fixed-point iteration did not reach the requested tolerance.
    #[error("convergence failure: residual {residual:e} after {iterations} iterations (tol {tol:e})")]
    Convergence {
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    /// A time stepper produced values outside the invariant range.
    #[error("stability failure: {0}")]
    Stability(String),

    /// Trajectory horizon too short for the requested resolvent tail tolerance.
    #[error("trajectory horizon {available} too short; need t_max >= {required} for tail tolerance {tail_tol:e}")]
    Horizon {
        available: f64,
        required: f64,
        tail_tol: f64,
    },

    /// A simulated population outgrew the particle cap.
    #[error("population cap {cap} exceeded at t = {at_time}")]
    CapExceeded { cap: usize, at_time: f64 },

    /// Too many replicas were discarded for the estimate to be trusted.
    #[error("unreliable estimate: {cap_hits} of {replicas} replicas hit the population cap")]
    Unreliable { cap_hits: usize, replicas: usize },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn stability(msg: impl Into<String>) -> Self {
        Error::Stability(msg.into())
    }
}
