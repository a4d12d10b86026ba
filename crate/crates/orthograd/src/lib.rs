//! Orthogonal-gradient model training and black-box transferability
//! evaluation at desk scale.
//!
//! The crate trains a classifier whose input-gradients are driven toward
//! orthogonality with a frozen reference model, then measures how that
//! misalignment changes the transfer rate of gradient-based adversarial
//! attacks, with and without classical input-transformation defenses.
//!
//! Module map:
//! - [`graph`]: taped reverse-mode autodiff with a differentiable backward
//!   pass (exact second-order gradients for the penalty term).
//! - [`nn`]: layers, Xavier init, cross-entropy loss, momentum SGD.
//! - [`ortho`]: gradient-similarity penalty and the orthogonal training loop.
//! - [`attacks`]: FGSM, I-FGSM, MI-FGSM, PGD under an L-infinity budget.
//! - [`defenses`]: JPEG-style compression, TV minimization, bit-depth
//!   reduction, bilateral filtering.
//! - [`eval`]: pre-verified sample selection, transfer protocol, reports.
//! - [`data`] / [`checkpoint`] / [`config`]: IDX and CSV containers,
//!   synthetic data, the `ORTH` checkpoint format, flat key-value configs.

#![forbid(unsafe_code)]

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod ortho;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
