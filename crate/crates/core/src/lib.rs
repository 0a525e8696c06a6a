//! Stochastic hidden-unit selection for weakly supervised localization.

pub mod autodiff;
pub mod bench;
pub mod cam;
pub mod config;
pub mod error;
pub mod export;
pub mod fickle;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
