//! Segmentation losses over class probabilities, the confidence filter on
//! pseudo-labels, and the unlabeled-loss weight schedule.
//!
//! Every loss returns its value together with the gradient with respect to
//! the probabilities; chain through [`crate::model::softmax_backward`] to
//! reach the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PixelMask, Tensor4};

/// Smoothing constant in both numerator and denominator of the soft Dice.
pub const DICE_EPS: f64 = 1e-5;
/// Lower clamp on probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    Dice,
    Ce,
    /// Mean of Dice and cross-entropy.
    Compound,
}

impl LossType {
    pub fn as_str(self) -> &'static str {
        match self {
            LossType::Dice => "dice",
            LossType::Ce => "ce",
            LossType::Compound => "compound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub tau: f64,
    pub loss_type: LossType,
    pub hard_labels: bool,
    /// Divide cross-entropy by all pixels instead of the retained ones.
    pub normalize_by_all_pixels: bool,
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub lambda_u: f64,
    pub ramp_iters: u64,
    pub enabled: bool,
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::Config(format!("lambda_u must be finite and >= 0, got {}", self.lambda_u)));
        }
        if self.ramp_iters < 1 {
            return Err(Error::Config("ramp_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// A loss value with its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor4,
}

fn check_inputs(probs: &Tensor4, target: &Tensor4, mask: Option<&PixelMask>) -> Result<()> {
    probs.check_same_shape(target, "target")?;
    if let Some(m) = mask {
        if (m.n, m.h, m.w) != (probs.n, probs.h, probs.w) {
            return Err(Error::Shape(format!(
                "pixel mask {}x{}x{} vs probabilities {}x{}x{}",
                m.n, m.h, m.w, probs.n, probs.h, probs.w
            )));
        }
    }
    Ok(())
}

fn mask_at(mask: Option<&PixelMask>, n: usize, hw: usize, i: usize) -> f64 {
    mask.map_or(1.0, |m| m.data[n * hw + i])
}

/// `1 − mean_{n,k} (2Σ m·p·q + ε) / (Σ m·p + Σ m·q + ε)`.
pub fn dice_loss(probs: &Tensor4, target: &Tensor4, mask: Option<&PixelMask>) -> Result<LossOutput> {
    check_inputs(probs, target, mask)?;
    let hw = probs.plane();
    let scale = 1.0 / (probs.n * probs.c) as f64;
    let mut grad = Tensor4::zeros(probs.n, probs.c, probs.h, probs.w);
    let mut total = 0.0;
    for n in 0..probs.n {
        for k in 0..probs.c {
            let base = (n * probs.c + k) * hw;
            let (p, q) = (&probs.data[base..base + hw], &target.data[base..base + hw]);
            let mut inter = 0.0;
            let mut sum = 0.0;
            for i in 0..hw {
                let m = mask_at(mask, n, hw, i);
                inter += m * p[i] * q[i];
                sum += m * (p[i] + q[i]);
            }
            let num = 2.0 * inter + DICE_EPS;
            let den = sum + DICE_EPS;
            total += num / den;
            let g = &mut grad.data[base..base + hw];
            for i in 0..hw {
                let m = mask_at(mask, n, hw, i);
                g[i] = -scale * m * (2.0 * q[i] * den - num) / (den * den);
            }
        }
    }
    Ok(LossOutput { value: 1.0 - total * scale, grad })
}

/// `−Σ m·Σ_k q·ln max(p, floor) / M`, where `M` is the retained pixel count
/// (or every pixel when `normalize_by_all_pixels`). Zero when `M = 0`.
pub fn ce_loss(
    probs: &Tensor4,
    target: &Tensor4,
    mask: Option<&PixelMask>,
    normalize_by_all_pixels: bool,
) -> Result<LossOutput> {
    check_inputs(probs, target, mask)?;
    let hw = probs.plane();
    let mut grad = Tensor4::zeros(probs.n, probs.c, probs.h, probs.w);
    let retained = match mask {
        Some(m) if !normalize_by_all_pixels => m.data.iter().sum::<f64>(),
        _ => (probs.n * hw) as f64,
    };
    if retained == 0.0 {
        return Ok(LossOutput { value: 0.0, grad });
    }
    let mut total = 0.0;
    for n in 0..probs.n {
        for k in 0..probs.c {
            let base = (n * probs.c + k) * hw;
            for i in 0..hw {
                let m = mask_at(mask, n, hw, i);
                let (p, q) = (probs.data[base + i], target.data[base + i]);
                if m == 0.0 || q == 0.0 {
                    continue;
                }
                total -= m * q * p.max(PROB_FLOOR).ln();
                if p > PROB_FLOOR {
                    grad.data[base + i] = -m * q / (p * retained);
                }
            }
        }
    }
    Ok(LossOutput { value: total / retained, grad })
}

pub fn loss_by_type(
    kind: LossType,
    probs: &Tensor4,
    target: &Tensor4,
    mask: Option<&PixelMask>,
    normalize_by_all_pixels: bool,
) -> Result<LossOutput> {
    match kind {
        LossType::Dice => dice_loss(probs, target, mask),
        LossType::Ce => ce_loss(probs, target, mask, normalize_by_all_pixels),
        LossType::Compound => {
            let d = dice_loss(probs, target, mask)?;
            let c = ce_loss(probs, target, mask, normalize_by_all_pixels)?;
            let mut grad = d.grad;
            for (g, h) in grad.data.iter_mut().zip(&c.grad.data) {
                *g = 0.5 * (*g + h);
            }
            Ok(LossOutput { value: 0.5 * (d.value + c.value), grad })
        }
    }
}

/// 1 where the largest class probability is at least `tau`.
pub fn confidence_mask(probs: &Tensor4, tau: f64) -> PixelMask {
    let hw = probs.plane();
    let mut mask = PixelMask::zeros(probs.n, probs.h, probs.w);
    for n in 0..probs.n {
        let sample = probs.sample(n);
        for i in 0..hw {
            let max = (0..probs.c).map(|k| sample[k * hw + i]).fold(f64::NEG_INFINITY, f64::max);
            if max >= tau {
                mask.data[n * hw + i] = 1.0;
            }
        }
    }
    mask
}

/// Unlabeled loss of student probabilities against the pseudo-target under
/// the confidence mask. Zero (with zero gradient) when nothing is retained.
pub fn consistency_loss(
    student_probs: &Tensor4,
    target: &Tensor4,
    mask: &PixelMask,
    cfg: &ConsistencyConfig,
) -> Result<LossOutput> {
    check_inputs(student_probs, target, Some(mask))?;
    if mask.data.iter().all(|&m| m == 0.0) {
        return Ok(LossOutput {
            value: 0.0,
            grad: Tensor4::zeros(student_probs.n, student_probs.c, student_probs.h, student_probs.w),
        });
    }
    loss_by_type(cfg.loss_type, student_probs, target, Some(mask), cfg.normalize_by_all_pixels)
}

/// `λ_u · exp(−5·(1 − min(t/T_r, 1))²)`, or `λ_u` when the ramp is disabled.
pub fn ramp_weight(t: u64, s: &RampSchedule) -> f64 {
    if !s.enabled || t >= s.ramp_iters {
        return s.lambda_u;
    }
    let phase = 1.0 - t as f64 / s.ramp_iters as f64;
    s.lambda_u * (-5.0 * phase * phase).exp()
}

pub fn total_loss(loss_sup: f64, loss_cons: f64, weight: f64) -> f64 {
    loss_sup + weight * loss_cons
}
