//! Landmark- and modality-conditioned cycle-consistent portrait synthesis.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! conditioning pipeline, a shared bidirectional generator with auxiliary
//! multi-scale outputs, patch discriminators, the training objectives, a
//! procedural toy-portrait corpus, the training loop, and evaluation metrics.

pub mod conditioning;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
