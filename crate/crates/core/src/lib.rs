//! Multi-stream conditional adversarial synthesis toolkit.
//!
//! The crate is organized around seven subsystems:
//!
//! - [`tensor`]: dense `[B,C,H,W]` tensors with a reverse-mode autodiff tape
//!   and the differentiable operations the networks are built from,
//!   plus the MTNS tensor file format.
//! - [`nn`]: generator (encoder / residual stack / decoder) and patch
//!   discriminator blocks with indexed-layer partial forward passes.
//! - [`model`]: assembly of K one-to-one streams, one many-to-one stream,
//!   the fusion block, and the fusion-position-dependent joint network.
//! - [`train`]: adversarial losses, Adam, learning-rate schedules, the
//!   two-phase training procedure, and checkpoint persistence.
//! - [`phantom`]: deterministic multi-contrast phantom dataset generation,
//!   normalization, splitting, and dataset I/O.
//! - [`metrics`]: PSNR, SSIM, Wilcoxon signed-rank, and report generation.
//! - [`sweep`]: the fusion-position x epochs grid search and its
//!   sensitivity summary.

pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod roles;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
