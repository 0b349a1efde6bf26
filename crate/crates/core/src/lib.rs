//! Desk-scale detection-transformer pipeline for images with many tiny
//! objects.
//!
//! The crate builds a complete pipeline out of small, independently tested
//! pieces:
//!
//! * [`tensor`] — a reverse-mode autodiff kernel over row-major `f64`
//!   tensors. Every op used by the model has a hand-written adjoint and a
//!   finite-difference check.
//! * [`pyramid`] — a strided conv backbone producing multi-scale feature
//!   maps, plus lossless flatten/unflatten between map and sequence form.
//! * [`counting`] — a density head that classifies each image into a count
//!   level, and the level → query-budget tables derived from dataset
//!   statistics.
//! * [`enhance`] — density-conditioned spatial and channel gating of the
//!   encoder feature maps.
//! * [`query`] — position scoring, top-k selection and anchor construction
//!   for a dynamically sized query set.
//! * [`transformer`] — dense multi-head encoder and decoder stacks with
//!   per-layer box refinement.
//! * [`matching`] — exact Hungarian assignment and the set-prediction loss
//!   (L1 + GIoU + focal) with per-term breakdown.
//! * [`metrics`] — COCO-style average precision and localisation-recall-
//!   precision (LRP) evaluation, stratified by object scale and image
//!   density.
//! * [`data`] — a seeded synthetic scene generator with long-tailed
//!   instance counts, plus on-disk dataset formats.
//! * [`model`], [`config`], [`train`], [`ablate`] — assembly of the full
//!   model, TOML experiment configuration, the two-stage training loop and
//!   the ablation grids.

pub mod ablate;
pub mod config;
pub mod counting;
pub mod data;
pub mod enhance;
pub mod error;
mod init;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod query;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use init::{collect_params, ParamVisitor};

pub use error::{Error, Result};
pub use tensor::Tensor;
