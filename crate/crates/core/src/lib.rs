//! Dual-domain guided diffusion for cross-domain sequential recommendation.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{DpgError, Result};
