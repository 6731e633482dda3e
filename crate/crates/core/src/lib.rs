//! Numerical solvers for systems of backward stochastic differential
//! equations with oblique reflection, and for the optimal switching problems
//! they describe.

pub mod banded;
pub mod error;
pub mod lattice;
pub mod model;
pub mod numeric;
pub mod pde;
pub mod penalty;
pub mod sde;
pub mod switching;
pub mod verify;

pub use error::{Result, SolverError};
pub use model::*;
