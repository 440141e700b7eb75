//! Desk-scale multimodal attention learners on a small causal transformer,
//! layer-level attention diagnostics, and a two-stage training harness.

pub mod cli;
pub mod error;
pub mod laws;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wings;

pub use error::{Error, Result};
