//! Spatial and semantic consistency training laboratory.
//!
//! A CPU-only stack for multi-label attribute recognition experiments:
//! a minimal reverse-mode tensor library, a desk-scale convolutional
//! backbone with class-activation-map attention, per-attribute momentum
//! memories with spatial/semantic consistency regularizers, a synthetic
//! glyph corpus that makes the mechanisms measurable, and the training,
//! metrics, and analysis tooling around them.

pub mod analysis;
pub mod consistency;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub mod rng;

pub use error::{Error, Result};
