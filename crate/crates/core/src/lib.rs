//! Randomly forced kinetic spray system, its diffusion-limit SPDE, and the Monte Carlo
//! harness that compares the two.

pub mod auxiliary;
pub mod coefficients;
pub mod driver;
pub mod error;
pub mod field;
pub mod harness;
pub mod kinetic;
pub mod quadrature;
pub mod rng;
pub mod spde;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
