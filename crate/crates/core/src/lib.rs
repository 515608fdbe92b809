//! Adversarially robust few-shot meta-learning.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which the gradient oracles assume.

pub mod attacks;
pub mod autodiff;
mod error;
pub mod eval;
pub mod finetune;
pub mod metatrain;
pub mod nn;
pub mod rng;
mod scalar;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParameterSet = nn::ParameterSet<f64>;
pub type Dataset = tasks::Dataset<f64>;
pub type Episode = tasks::Episode<f64>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
