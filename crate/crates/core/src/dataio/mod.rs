//! Clip ingestion, frame sampling, augmentation, patchification and
//! synthetic data.

pub mod clip;
pub mod image;
pub mod patch;
pub mod sampling;
pub mod synth;

pub use clip::{load_clip, load_dataset, VideoClip};
pub use image::{Image, LabelImage};
pub use patch::{normalize_patches, normalize_target, patchify, unpatchify, TARGET_EPS};
pub use sampling::{augment, sample_sequence, vire_reverse, ClipSpec, CropConfig, FrameSequence, GapRange};
pub use synth::{gen_dataset, gen_synthetic, SynthConfig};
