//! Sparsely gated convolutional mixture-of-experts networks with a shared
//! embedding network, trained and analysed on CPU.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`).

// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod embedding;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{build_deepmoe, DeepMoe, ModelConfig};
pub use params::{ParamGroup, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default working precision; `f64` with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type DeepMoe32 = DeepMoe<f32>;
pub type DeepMoe64 = DeepMoe<f64>;
