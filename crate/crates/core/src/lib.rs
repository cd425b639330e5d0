//! Two-parameter nonlinear Young calculus on dyadic grids.

pub mod drift;
pub mod error;
pub mod grid;
pub mod holder;
pub mod io;
pub mod noise;
pub mod occupation;
pub mod rng;
pub mod sewing;
pub mod solver;
pub mod spatial;
pub mod wave;

pub use error::{Error, Result};
pub use grid::{Field2D, Grid2D, Path1D};
