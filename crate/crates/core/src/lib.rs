//! Prompt-augmented low-rank fine-tuning for column type annotation.
//!
//! The crate covers the whole pipeline at desk scale: synthetic labeled
//! column corpora, value sampling, prompt rendering, dataset augmentation
//! across prompt templates, a small decoder-only language model with
//! hand-written reverse-mode gradients, low-rank adapters, a trainer, and an
//! evaluation harness that measures weighted F1 and its spread across
//! prompt templates.

pub mod augment;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod sampling;
pub mod seed;
pub mod synthgen;
pub mod table;
pub mod trainer;

pub use error::{Error, Result};

/// Version string embedded in every fingerprinted artifact.
pub const CODE_VERSION: &str = concat!("ctalab/", env!("CARGO_PKG_VERSION"));
