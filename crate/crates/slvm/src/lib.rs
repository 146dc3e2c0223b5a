//! Few-shot semantic segmentation around a frozen encoder/decoder pair.
//!
//! The pipeline: a frozen feature provider yields high-level and
//! intermediate feature maps; a parameter-free prior module scores each
//! query pixel against mask-weighted support features with cosine
//! similarity; a small trainable head turns the prior into soft prompt
//! indicators that gate what the frozen decoder sees; training runs a
//! two-phase schedule over a self-guidance loss and a fine-tuning loss
//! while fingerprints verify nothing frozen ever moves.

pub mod apl;
pub mod augment;
pub mod cache;
pub mod config;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod features;
pub mod fingerprint;
pub mod fixture;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pgml;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AblationFlags, SlvmModel};
pub use tensor::{BinaryMask, Tensor};
