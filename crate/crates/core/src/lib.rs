//! Attention-boosted encoder-decoder semantic segmentation, built on a small
//! double-precision reverse-mode differentiation engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: NCHW tensors, the recording [`tensor::Graph`] and gradient checks
//! - [`params`]: learnable layer parameters and the forward [`params::Session`]
//! - [`blocks`]: attention-boosting gate/module, bottleneck, dilated bridge, attention fusion
//! - [`model`]: network assembly, ablation toggles, parameter accounting, checkpoints
//! - [`train`]: class weighting, weighted cross-entropy, momentum SGD, training loop
//! - [`metrics`]: confusion matrix and IoU
//! - [`gradsuite`]: finite-difference checks over ops, blocks and a micro model
//! - [`data`]: PPM/PGM files, manifests, palettes and the synthetic scene generator

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
