//! A conditional, patch-level autoregressive prior over diffusion initial
//! noise. Each patch is modeled as a diagonal Gaussian whose parameters are
//! predicted by a causally masked transformer decoder that cross-attends to
//! a tokenized condition.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pick a concrete precision.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod model;
pub mod patch;
pub mod pref;
pub mod rng;
pub mod sample;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{GaussianParams, SampleMode};
pub use model::{AttentionMask, Condition, KvCache, ModelConfig, ModelState};
pub use patch::{NoiseTensor, PatchSequence, TensorShape};
pub use rng::NoiseRng;
pub use scalar::Scalar;

pub type ModelState32 = ModelState<f32>;
pub type ModelState64 = ModelState<f64>;
pub type NoiseTensor32 = NoiseTensor<f32>;
pub type NoiseTensor64 = NoiseTensor<f64>;
