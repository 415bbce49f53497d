//! Dataset-bias disentanglement at desk scale.
//!
//! A single autoencoder is trained on the union of several synthetic datasets
//! that share a ground-truth content factor but differ in rendering style and
//! content curation. A conditional invertible flow then maps each
//! representation `x` with dataset label `y` to a content code
//! `z = flow(x | y)` distributed as a standard normal for every label, which
//! makes `z` independent of `y`. Projecting onto another dataset is
//! `x* = flow^-1(z | y*)`.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`nn`], [`autoencoder`],
//! [`flow`], [`optim`]) is generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline layers above it use the `f64` aliases exported here.

// `!(a > b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod autoencoder;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use rng::SeedRng;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Autoencoder = autoencoder::AeModel<f64>;
pub type Autoencoder32 = autoencoder::AeModel<f32>;
pub type Flow = flow::FlowModel<f64>;
pub type Flow32 = flow::FlowModel<f32>;
pub type Adam = optim::Adam<f64>;
