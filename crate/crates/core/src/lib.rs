//! Similarity-regularized classifier training at desk scale.
//!
//! The crate bundles everything the pipeline needs: a small reverse-mode
//! autodiff engine with the layers for residual classifiers and conv
//! encoders (`tensor`), SNR-weighted similarity-matrix estimation from
//! multi-trial responses (`similarity`), the arctanh similarity penalty
//! with trainable layer weighting (`regularizer`), the joint training
//! loop (`trainer`), Gaussian-noise and minimal-perturbation adversarial
//! evaluation (`robustness`), synthetic data generators (`synth`), and
//! the on-disk tensor/manifest formats (`io`).

pub mod error;
pub mod io;
pub mod parallel;
pub mod regularizer;
pub mod rng;
pub mod robustness;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, CoreResult};
