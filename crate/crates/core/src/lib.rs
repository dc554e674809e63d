//! Numerical laboratory for small-noise distribution-function SPDEs of
//! super-Brownian motion and Fleming-Viot type, their centered fluctuation
//! fields, and the quadratic rate functionals that govern moderate
//! deviations of those fields.

pub mod cli;
pub mod error;
pub mod grid;
pub mod io;
pub mod measures;
pub mod models;
pub mod noise;
pub mod sim;
pub mod variational;
pub mod verify;

pub use error::{LabError, Result};
