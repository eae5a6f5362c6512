//! Looped transformer laboratory.
//!
//! A weight-shared transformer block is iterated `t` times over a latent
//! state. The crate provides the autodiff engine, the looped model, trajectory
//! diagnostics (norms, convergence, PCA, power-iteration spectral probes), the
//! random-depth training loop with Jacobian spectral-radius regularization,
//! and the multi-digit addition testbed.

pub mod arith;
pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Parameters32 = model::Parameters<f32>;
pub type Parameters64 = model::Parameters<f64>;
