//! Continuous-time conditional diffusion for image super-resolution.

pub mod adjoint;
pub mod checkpoint;
pub mod image;
pub mod model;
pub mod process;
pub mod rng;
pub mod sampler;
pub mod selfcheck;
pub mod solver;
pub mod tensor;
pub mod train;
