//! Synthetic labeled sprite videos and the on-disk clip format.

mod clip;
mod manifest;
mod synth;

pub use clip::{Domain, TrueMotion, VideoClip};
pub use manifest::{file_sha256, gen_dataset, test_count, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{
    clip_id, synth_clip, synth_clip_with, ActionClass, Background, ClipRecipe, SpriteShape, SynthConfig,
    GENERATOR_TAG,
};

/// Number of action classes produced by the generator.
pub const NUM_CLASSES: usize = 6;
