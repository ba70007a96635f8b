//! KV-cache compression for decoder-only transformers by truncated SVD of the
//! key and value projections.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f64` and `f32`); the
//! aliases below name the common instantiations. Containers on disk are
//! always `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod compressor;
pub mod container;
pub mod densemat;
pub mod error;
pub mod experiments;
pub mod model;
pub mod ops;
pub mod rng;
pub mod runtime;
pub mod scalar;
pub mod sensitivity;

pub use error::{Error, ErrorClass, Result};

pub type Matrix64 = densemat::Matrix<f64>;
pub type Matrix32 = densemat::Matrix<f32>;
pub type Model64 = model::ModelWeights<f64>;
pub type Model32 = model::ModelWeights<f32>;
pub type CompressedModel64 = compressor::CompressedModel<f64>;
pub type CompressedModel32 = compressor::CompressedModel<f32>;
pub type KvCache64 = runtime::KvCache<f64>;
pub type KvCache32 = runtime::KvCache<f32>;
