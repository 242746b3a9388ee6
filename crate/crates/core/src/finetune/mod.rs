//! Fine-tuning utilities: LoRA adapters, parameter freezing, and
//! on-the-fly waveform augmentation.

pub mod augment;
pub mod lora;

pub use augment::{apply_op, apply_speed, apply_tempo, apply_volume, augment, AugKind, AugOp, AugmentationSpec};
pub use lora::{count_trainable, freeze, inject_lora, merge_lora, unfreeze, LoraSpec, LoraTarget};
