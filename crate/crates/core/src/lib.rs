//! Context-ordered, gated cross-modal selective state space models for
//! utterance-level sentiment regression, on a small `f64` reverse-mode
//! tensor engine.
//!
//! Layering, bottom up:
//!
//! - [`engine`]: tensors, the differentiation tape, AdamW, gradient checks.
//! - [`ssm`]: zero-order-hold discretization and the selective scan.
//! - [`bssm`]: bidirectional selective scanning block.
//! - [`gcmn`]: three-stream gated cross-modal layer and its stack.
//! - [`model`]: sequence construction, prediction heads, multi-task loss.
//! - [`data`], [`train`], [`metrics`], [`cost`], [`export`], [`ablation`]:
//!   datasets, training, evaluation and accounting.

pub mod ablation;
pub mod bssm;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod export;
pub mod gcmn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
