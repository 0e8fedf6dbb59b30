pub mod adjoint;
pub mod diffusion;
pub mod discretization;
pub mod error;
pub mod harness;
pub mod score;
pub mod solver;
pub mod teacher;
pub mod trainer;
pub mod vector;

pub use error::{Error, Result};
