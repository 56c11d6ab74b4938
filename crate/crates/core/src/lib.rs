//! Semi-supervised segmentation with a teacher–student pair: strong
//! perturbation of unlabeled inputs, confidence-filtered pseudo-labels, and a
//! teacher kept stable by averaging both weights and normalization
//! statistics.
//!
//! ```no_run
//! use dpms::data::{generate_synthetic_dataset, load_dataset, SynthConfig};
//! use dpms::trainer::{run_training, LoadedData, RunOptions, TrainConfig};
//!
//! # fn main() -> dpms::Result<()> {
//! let dir = std::path::Path::new("toy-data");
//! generate_synthetic_dataset(&SynthConfig::default(), dir)?;
//! let data = LoadedData::from_dataset(&load_dataset(dir)?)?;
//! let cfg = TrainConfig { iterations: 200, ..TrainConfig::default() };
//! let out = run_training(&cfg, &data, &RunOptions::default())?;
//! println!("{:.2}", out.final_eval.unwrap().student.mean.dice);
//! # Ok(())
//! # }
//! ```

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod ema;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/teacher.md")]
    mod teacher {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
}
