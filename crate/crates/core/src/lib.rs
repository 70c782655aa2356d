//! Bilinear, threshold-sparse, adaptive-span and hybrid attention inside a
//! GPT-2-style decoder-only transformer, with the training loop, tokenizer,
//! summarization metrics and verification harness around it.

pub mod alloc_track;
pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod properties;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
