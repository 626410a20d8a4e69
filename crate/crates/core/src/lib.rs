//! Dual-branch self-supervised pretraining and hooked two-resolution
//! segmentation for whole-slide images, with a small tape autograd.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the working precision used by the CLI.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod ctfm;
pub mod data;
pub mod dsl;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hooknet;
pub mod nn;
pub mod npy;
pub mod optim;
pub mod pretrain;
pub mod scalar;
pub mod seeding;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

pub type Real = f32;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Encoder = encoder::DualBranchEncoder<Real>;
pub type HeadBank = dsl::DslHeadBank<Real>;
pub type PretrainState = pretrain::PretrainState<Real>;
pub type HookNet = hooknet::HookNetModel<Real>;
