use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugConfig;
use crate::data::{SamplerConfig, SamplingStrategy};
use crate::ema::EmaConfig;
use crate::error::{Error, Result};
use crate::losses::{ConsistencyConfig, LossType, RampSchedule};
use crate::model::SegNetConfig;

/// Every knob of a training run. Missing keys take the defaults below;
/// unknown keys are rejected by [`TrainConfig::from_json_str`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// L2 penalty on convolution kernels only.
    pub weight_decay: f64,
    pub batch_labeled: usize,
    /// Unlabeled batch size is `size_ratio * batch_labeled`.
    pub size_ratio: usize,
    pub sampler: SamplingStrategy,
    pub alpha: f64,
    pub lambda_u: f64,
    /// Ramp length in iterations; defaults to 150 labeled epochs.
    pub ramp_iters: Option<u64>,
    pub ramp_up: bool,
    pub tau: f64,
    /// When off, every pixel is kept regardless of confidence.
    pub use_threshold: bool,
    pub sup_loss: LossType,
    pub cons_loss: LossType,
    pub hard_labels: bool,
    pub normalize_by_all_pixels: bool,
    pub aug_geometric: bool,
    pub aug_intensity: bool,
    pub aug_copy_paste: bool,
    pub ema_teacher: bool,
    pub ema_bn: bool,
    pub extra_weak: bool,
    pub seed: u64,
    pub crop_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub norm_momentum: f64,
    /// Defaults to `iterations / 20`.
    pub eval_interval: Option<u64>,
    /// Periodic checkpoints; the final checkpoint is always written.
    pub checkpoint_interval: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr0: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            weight_decay: 1e-4,
            batch_labeled: 4,
            size_ratio: 1,
            sampler: SamplingStrategy::OversampleLabeled,
            alpha: 0.99,
            lambda_u: 2.0,
            ramp_iters: None,
            ramp_up: true,
            tau: 0.95,
            use_threshold: true,
            sup_loss: LossType::Dice,
            cons_loss: LossType::Dice,
            hard_labels: true,
            normalize_by_all_pixels: false,
            aug_geometric: true,
            aug_intensity: true,
            aug_copy_paste: true,
            ema_teacher: true,
            ema_bn: true,
            extra_weak: true,
            seed: 0,
            crop_size: 48,
            base_channels: 16,
            depth: 3,
            norm_momentum: 0.1,
            eval_interval: None,
            checkpoint_interval: None,
        }
    }
}

fn known_keys() -> Vec<String> {
    match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("TrainConfig serializes to an object"),
    }
}

/// Closest known key, if any is plausibly a typo of `key`.
pub fn suggest_key(key: &str, known: &[String]) -> Option<String> {
    known
        .iter()
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .filter(|(d, k)| *d <= 2.max(k.len() / 4))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k.clone())
}

/// Rejects keys outside `known` with a near-miss suggestion.
pub fn check_keys(obj: &Map<String, Value>, known: &[String]) -> Result<()> {
    for key in obj.keys() {
        if !known.iter().any(|k| k == key) {
            return Err(Error::UnknownKey { key: key.clone(), suggestion: suggest_key(key, known) });
        }
    }
    Ok(())
}

impl TrainConfig {
    pub fn keys() -> Vec<String> {
        known_keys()
    }

    pub fn from_json_value(value: Value) -> Result<Self> {
        let Value::Object(obj) = &value else {
            return Err(Error::Config("training config must be a JSON object".into()));
        };
        check_keys(obj, &known_keys())?;
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_json_value(serde_json::from_str(text)?)
    }

    /// Applies a partial object of overrides on top of this config.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self> {
        check_keys(overrides, &known_keys())?;
        let Value::Object(mut base) = serde_json::to_value(self)? else {
            unreachable!("TrainConfig serializes to an object");
        };
        for (k, v) in overrides {
            base.insert(k.clone(), v.clone());
        }
        Self::from_json_value(Value::Object(base))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations < 1 {
            return fail("iterations must be >= 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return fail("weight_decay and poly_power must be >= 0".into());
        }
        if self.batch_labeled < 1 || self.size_ratio < 1 {
            return fail("batch_labeled and size_ratio must be >= 1".into());
        }
        if self.ramp_iters == Some(0) {
            return fail("ramp_iters must be >= 1".into());
        }
        if self.eval_interval == Some(0) || self.checkpoint_interval == Some(0) {
            return fail("eval_interval and checkpoint_interval must be >= 1".into());
        }
        self.ema().validate()?;
        self.consistency().validate()?;
        RampSchedule { lambda_u: self.lambda_u, ramp_iters: 1, enabled: self.ramp_up }.validate()?;
        let probe = SegNetConfig {
            in_channels: 1,
            num_classes: 2,
            base_channels: self.base_channels,
            depth: self.depth,
            norm_momentum: self.norm_momentum,
        };
        probe.validate()?;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(probe.size_multiple()) {
            return fail(format!(
                "crop_size {} must be a positive multiple of {}",
                self.crop_size,
                probe.size_multiple()
            ));
        }
        Ok(())
    }

    pub fn model(&self, in_channels: usize, num_classes: usize) -> SegNetConfig {
        SegNetConfig {
            in_channels,
            num_classes,
            base_channels: self.base_channels,
            depth: self.depth,
            norm_momentum: self.norm_momentum,
        }
    }

    pub fn ema(&self) -> EmaConfig {
        EmaConfig { alpha: self.alpha, ema_bn: self.ema_bn }
    }

    pub fn consistency(&self) -> ConsistencyConfig {
        ConsistencyConfig {
            tau: self.tau,
            loss_type: self.cons_loss,
            hard_labels: self.hard_labels,
            normalize_by_all_pixels: self.normalize_by_all_pixels,
        }
    }

    /// Ramp length: explicit, or 150 epochs over the labeled set.
    pub fn ramp(&self, n_labeled: usize) -> RampSchedule {
        let epoch = n_labeled.div_ceil(self.batch_labeled) as u64;
        RampSchedule {
            lambda_u: self.lambda_u,
            ramp_iters: self.ramp_iters.unwrap_or(150 * epoch).max(1),
            enabled: self.ramp_up,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            strategy: self.sampler,
            batch_labeled: self.batch_labeled,
            size_ratio: self.size_ratio,
            seed: self.seed,
        }
    }

    pub fn augment(&self) -> AugConfig {
        AugConfig {
            geometric: self.aug_geometric,
            intensity: self.aug_intensity,
            copy_paste: self.aug_copy_paste,
            ..AugConfig::new((self.crop_size, self.crop_size))
        }
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_interval.unwrap_or((self.iterations / 20).max(1))
    }
}

/// `lr0 · (1 − t/T)^power`, clamped to zero past the end.
pub fn poly_lr(t: u64, total: u64, lr0: f64, power: f64) -> f64 {
    if t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}
