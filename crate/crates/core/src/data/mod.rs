//! Synthetic partially labeled organ-layout datasets.

mod batch;
mod generate;
mod manifest;
mod sample;

pub use batch::{Batch, Dataset, MAX_AUGMENT_GAIN, MAX_AUGMENT_SHIFT};
pub use generate::{
    full_manifest_path, generate, generate_sample, restrict_labels, stage_manifest_path, GeneratedData,
    GeneratorConfig, ShapeSpec,
};
pub use manifest::{Manifest, ManifestEntry, Split, MANIFEST_VERSION};
pub use sample::{load_sample, save_sample, Sample};
