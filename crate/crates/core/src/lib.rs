//! Adaptive P-spline triangular transport maps.

pub mod component;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod map;
pub mod objective;
pub mod solver;
pub mod spline;
pub mod wavy;

pub use error::{Error, Result};
