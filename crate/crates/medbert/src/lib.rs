//! Desk-scale pipeline for pretraining a contextualized-embedding
//! transformer on structured EHR code sequences and fine-tuning it for
//! disease prediction, alongside GRU/Bi-GRU/RETAIN baselines.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod scalar;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Gradient-checking-precision tensor.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParameterStore32 = autodiff::ParameterStore<f32>;
pub type ParameterStore64 = autodiff::ParameterStore<f64>;
