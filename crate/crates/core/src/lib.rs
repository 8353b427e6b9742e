//! Spiking neural network training with surrogate gradients, and
//! compression to a resource budget by minimax optimization over a learnable
//! global sparsity level.

pub mod config;
pub mod data;
pub mod error;
pub mod minimax;
pub mod optim;
pub mod resource;
pub mod snn;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
