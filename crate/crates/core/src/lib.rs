//! Activation transport operators.
//!
//! Regularised affine maps that predict a downstream residual-stream vector
//! from an upstream one, together with the tooling to evaluate them:
//!
//! * [`tensor_io`]: ATD activation dumps, sidecar metadata, dataset splits.
//! * [`synth`]: planted low-rank transport data with known ground truth.
//! * [`operator`]: ridge fits, cross-validation, rank truncation, `.ato` files.
//! * [`features`]: scoring predictions along SAE decoder directions, `.fdict` files.
//! * [`efficiency`]: whitening, canonical correlations, R² ceilings, efficiency.
//! * [`toy`]: a small transformer for ablation and patching experiments.

pub mod efficiency;
pub mod error;
pub mod features;
pub mod operator;
pub mod stats;
pub mod synth;
pub mod tensor_io;
pub mod toy;

pub use error::{Error, Result};

/// Dense `f64` matrix used for every activation block.
pub type Matrix = nalgebra::DMatrix<f64>;
