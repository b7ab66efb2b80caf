//! Particle Monte Carlo solvers for mean-field backward doubly stochastic
//! differential equations, their derivative processes, and numerical checks of
//! the associated identities and estimates.

pub mod cli;
pub mod coefficients;
pub mod error;
pub mod backward;
pub mod forward;
pub mod measures;
pub mod paths;
pub mod verify;

pub use error::{Error, Result};
