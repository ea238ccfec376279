//! Core algorithms for factorizing the latent space of a frozen
//! encoder/decoder into independent, attribute-aligned factor vectors.
//!
//! The crate is organized around six concerns:
//!
//! - [`autodiff`]: a small reverse-mode engine for dense nets, including the
//!   gradient-reversal node and fused batch-norm/dropout/cross-entropy ops.
//! - [`nn`] / [`optim`]: MLP parameters, truncated-normal init, Adam, and
//!   adaptive gradient clipping.
//! - [`synth`]: a deterministic shapes dataset with exact generative
//!   factors, correlated-Gaussian samplers, and episode sampling.
//! - [`host`]: the frozen autoencoder whose latent space gets factorized,
//!   plus import/export of externally produced representations.
//! - [`fden`]: the decomposer/entangler plug-in, its losses, the training
//!   loop, and factor manipulation (interpolation, mean transfer).
//! - [`metrics`]: MI estimators with analytic and brute-force oracles,
//!   disentanglement scores, RSA, and episodic few-shot evaluation.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod fden;
pub mod host;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;

pub use fden::{FactorSet, FdenConfig, FdenModel, MarginalMode};
pub use host::{HostConfig, HostModel, LatentDataset};
pub use nn::{Activation, LayerSpec, Mlp, Mode};
pub use synth::{Episode, ShapeDataset, ShapeFactors, ShapeKind};
