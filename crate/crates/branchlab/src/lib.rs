//! Numerical laboratory for spatial branching particle systems.
//!
//! The crate follows one thread end to end: a branching mechanism on a line
//! segment or circle defines a nonlinear flow on test functions, that flow
//! propagates distributional information about the particle cloud, and an
//! event-driven simulator provides the stochastic ground truth the analytic
//! pieces are checked against.

pub mod error;
pub mod space;
pub mod kernel;
pub mod loglaplace;
pub mod configuration;

mod density;

pub use error::{Error, Result};
