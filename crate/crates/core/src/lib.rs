//! Safe active learning for Gaussian-process ODE models.

pub mod acquisition;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod inducing;
pub mod integrator;
pub mod kernel;
pub mod model;
pub mod pathwise;
pub mod planner;
pub mod rng;
pub mod systems;

pub use error::{Error, Result};
