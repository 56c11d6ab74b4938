//! A small 2D UNet with explicitly exposed normalization statistics.
//!
//! Trainable tensors live in a [`ParamSet`]; batch-norm running buffers live
//! in a separate [`NormStats`]. Keeping them apart lets the teacher average
//! each independently and lets the statistics-only forward touch one without
//! the other.

mod layers;
mod params;
mod probs;
mod unet;

pub use params::{NormStats, Param, ParamKind, ParamSet, RunningStats};
pub use probs::{argmax_labels, one_hot, softmax_backward, softmax_probs};
pub use unet::{ForwardOutput, SegNet, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    /// Number of 2× down/up-sampling stages.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Running-statistics momentum `m`: `new = (1 - m)·old + m·batch`.
    #[serde(default = "default_norm_momentum")]
    pub norm_momentum: f64,
}

fn default_base() -> usize {
    16
}
fn default_depth() -> usize {
    3
}
fn default_norm_momentum() -> f64 {
    0.1
}

impl SegNetConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            base_channels: default_base(),
            depth: default_depth(),
            norm_momentum: default_norm_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.in_channels < 1 || self.base_channels < 1 {
            return Err(Error::Config("in_channels and base_channels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("norm_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// How a forward pass treats normalization and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, running stats updated, tape recorded for backward.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
    /// Batch statistics and running-stat update as in `Train`, no tape.
    StatsOnly,
}
