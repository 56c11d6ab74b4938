//! Datasets: synthetic generation, on-disk layout and batch planning.
//!
//! A dataset directory holds `manifest.json`, `images/<id>.f32` (headerless
//! little-endian f32, channel-major then row-major) and `masks/<id>.u8`
//! (headerless u8 class ids). Unlabeled samples carry no mask file.

mod io;
mod sampler;
mod synth;

pub use io::{load_dataset, write_sample, Dataset, DatasetManifest, Sample, SampleEntry, Split};
pub use sampler::{make_epoch_plan, EpochPlan, PlanStep, SamplerConfig, SamplingStrategy};
pub use synth::{generate_sample, generate_synthetic_dataset, ShapeKind, SynthConfig};
