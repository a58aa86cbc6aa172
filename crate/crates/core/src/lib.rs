//! Context-window transformer encoders for cross-modal clip–sentence
//! retrieval.
//!
//! A clip is embedded together with the `m` clips before and after it in
//! the same video; a caption is embedded either alone or with its
//! neighbouring captions. Both land on a shared unit hypersphere and are
//! trained with an in-batch NCE loss, a neighbouring-clip NCE loss and a
//! uniformity regularizer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, Var};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
