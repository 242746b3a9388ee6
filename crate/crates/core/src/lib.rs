//! Recipe-free training pipeline.
//!
//! Kaldi-style manifests and extractor-based datasets feed a two-phase
//! trainer (statistics collection, then AdamW training with checkpointing
//! and early stopping). Fine-tuning helpers add LoRA adapters and waveform
//! augmentation; `modelhub` resolves and caches pretrained bundles; and
//! `reference` provides a synthetic corpus plus a small classifier so the
//! whole pipeline runs on a laptop.

pub mod audio;
pub mod batching;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod manifest;
pub mod model;
pub mod modelhub;
pub mod reference;
pub mod stats;
pub mod trainer;

pub use error::{BoxError, Error, Result};
