//! A desk-scale laboratory for class-incremental semantic segmentation with
//! self-attention transfer.
//!
//! The crate contains a small reverse-mode differentiator ([`tensor`]), a micro
//! transformer segmenter exposing its attention maps ([`model`]), the
//! class-region pooled attention distillation losses ([`distill`]), the
//! continual-learning engine ([`continual`]), a synthetic scene generator
//! ([`data`]) and mIoU reporting ([`metrics`]).

pub mod distill;
pub mod continual;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE_ID: u8 = 255;
