//! Referring image segmentation: a hierarchical vision encoder and a text
//! encoder with per-stage mutual cross-modal alignment, a text-conditioned
//! top-down decoder, and the data, training and evaluation tooling around them.

pub mod alignment;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
