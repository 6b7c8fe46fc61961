//! Traffic state estimation from sparse probe trajectories with rotated-kernel
//! sparse Gaussian processes.

pub mod asm;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gp_exact;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod multilane;
pub mod synth;
pub mod vsgp;

pub use error::{Error, Result};
