//! Core algorithms for perturbation-based image anomaly detection.
//!
//! This crate is `no_std`-compatible (it only needs `alloc`): everything here
//! is pure computation over in-memory tensors. Dataset files, checkpoints,
//! CSV logs and the CLI live in the companion `oiad` crate.
//!
//! The pipeline implemented here:
//!
//! 1. [`nn`] / [`graph`] — encoder, decoder and total-correlation
//!    discriminator networks with reverse-mode automatic differentiation.
//! 2. [`objective`] — the detector-VAE training objective: reconstruction,
//!    KL against a learned precision prior, a discriminator-based total
//!    correlation estimate, and the precision regularizer.
//! 3. [`train`] — the alternating two-player update (VAE step, then
//!    discriminator step) with Adam.
//! 4. [`morph`] — per-code normal value ranges and the iterative stochastic
//!    search that produces natural latent perturbations.
//! 5. [`consistency`] — structure-consistency scoring of a sample against
//!    its reconstructed morphs (MSE / LOSS / SSIM).
//! 6. [`detector`] — fractile-threshold calibration, verdicts, anomaly
//!    scores and threshold sweeps.
//! 7. [`baselines`] — PCA + KDE / GMM reference detectors.
//! 8. [`eval`] — confusion rates and ROC/AUC.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod consistency;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod morph;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::{Scalar, Tensor};
