//! Synthetic scenes, augmentation and on-disk datasets.

pub mod augment;
pub mod io;
pub mod synth;

pub use augment::{augment, AugmentConfig, AugmentPlan, CropWindow};
pub use synth::{generate_scene, mix_seed, GeneratorConfig, SyntheticScene};
