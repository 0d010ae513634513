//! Activation compression for a small CNN. Each hooked feature map is
//! rotated onto its per-layer PCA basis, the channels are split into
//! importance groups, and every group is quantized at a bit-width searched
//! during distillation fine-tuning. The least important group is dropped.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fsio;
pub mod losses;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod search;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
