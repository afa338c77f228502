//! CNN-injected transformer for surface-defect segmentation.
//!
//! A self-contained implementation: dense tensors with reverse-mode autodiff,
//! a residual CNN stem with an FPN top-down path, a four-stage transformer
//! encoder with one-way CNN feature injection and variance-ranked Top-K
//! self-attention, a UNet-style decoder, training/evaluation utilities, a
//! deterministic synthetic defect dataset, and binary checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod profile;
pub mod real;
pub mod rng;
pub mod stem;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Tensor, Var};
pub use real::Real;
