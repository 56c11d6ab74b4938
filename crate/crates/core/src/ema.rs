//! Teacher maintenance by exponential moving average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NormStats, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
    /// Also average the normalization running statistics.
    pub ema_bn: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.99, ema_bn: true }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn init_teacher(student_params: &ParamSet, student_stats: &NormStats) -> TeacherState {
    TeacherState { params: student_params.clone(), stats: student_stats.clone() }
}

#[inline]
fn blend(teacher: &mut [f64], student: &[f64], alpha: f64) {
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
}

/// `teacher ← α·teacher + (1 − α)·student` for every parameter, and for the
/// running statistics when `ema_bn` is set.
pub fn ema_update(
    teacher: &mut TeacherState,
    student_params: &ParamSet,
    student_stats: &NormStats,
    cfg: &EmaConfig,
) -> Result<()> {
    cfg.validate()?;
    teacher.params.check_layout(student_params)?;
    teacher.stats.check_layout(student_stats)?;
    for (t, s) in teacher.params.iter_mut().zip(student_params.iter()) {
        blend(&mut t.data, &s.data, cfg.alpha);
    }
    if cfg.ema_bn {
        for (t, s) in teacher.stats.layers.iter_mut().zip(&student_stats.layers) {
            blend(&mut t.mean, &s.mean, cfg.alpha);
            blend(&mut t.var, &s.var, cfg.alpha);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Param, ParamKind, RunningStats};
    use proptest::prelude::*;

    fn state(values: &[f64], mean: &[f64], var: &[f64]) -> (ParamSet, NormStats) {
        let params = ParamSet::new(vec![Param {
            name: "w".into(),
            shape: vec![values.len()],
            kind: ParamKind::Weight,
            data: values.to_vec(),
        }]);
        let stats =
            NormStats { layers: vec![RunningStats { name: "bn".into(), mean: mean.to_vec(), var: var.to_vec() }] };
        (params, stats)
    }

    #[test]
    fn single_update_interpolates() {
        let (tp, ts) = state(&[0.0, 0.0], &[0.0], &[1.0]);
        let (sp, ss) = state(&[1.0, 1.0], &[2.0], &[3.0]);
        let mut teacher = init_teacher(&tp, &ts);
        ema_update(&mut teacher, &sp, &ss, &EmaConfig::default()).unwrap();
        for &v in &teacher.params.iter().next().unwrap().data {
            assert!((v - 0.01).abs() < 1e-15);
        }
        assert!((teacher.stats.layers[0].mean[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn deep_copy_and_fixed_point() {
        let (mut sp, ss) = state(&[0.3, -0.7], &[0.1], &[0.9]);
        let mut teacher = init_teacher(&sp, &ss);
        let snapshot = teacher.clone();
        ema_update(&mut teacher, &sp, &ss, &EmaConfig::default()).unwrap();
        assert_eq!(teacher, snapshot);
        sp.iter_mut().next().unwrap().data[0] = 5.0;
        assert_eq!(teacher, snapshot);
    }

    #[test]
    fn closed_form_after_hundred_updates() {
        let theta0 = [0.5, -1.25, 3.0];
        let (tp, ts) = state(&theta0, &[0.0], &[1.0]);
        let (sp, ss) = state(&[2.0, 0.75, -1.0], &[4.0], &[0.5]);
        let cfg = EmaConfig { alpha: 0.99, ema_bn: false };
        let mut teacher = init_teacher(&tp, &ts);
        for _ in 0..100 {
            ema_update(&mut teacher, &sp, &ss, &cfg).unwrap();
        }
        let a100 = 0.99f64.powi(100);
        for ((&got, &t0), &s) in
            teacher.params.iter().next().unwrap().data.iter().zip(&theta0).zip(&sp.iter().next().unwrap().data)
        {
            assert!((got - (a100 * t0 + (1.0 - a100) * s)).abs() < 1e-12);
        }
        assert_eq!(teacher.stats, ts);
    }

    #[test]
    fn alpha_zero_copies_student() {
        let (tp, ts) = state(&[1.0], &[1.0], &[1.0]);
        let (sp, ss) = state(&[-2.0], &[3.0], &[4.0]);
        let mut teacher = init_teacher(&tp, &ts);
        ema_update(&mut teacher, &sp, &ss, &EmaConfig { alpha: 0.0, ema_bn: true }).unwrap();
        assert_eq!(teacher.params, sp);
        assert_eq!(teacher.stats, ss);
    }

    #[test]
    fn rejects_layout_mismatch_and_bad_alpha() {
        let (tp, ts) = state(&[1.0], &[1.0], &[1.0]);
        let (sp, ss) = state(&[1.0, 2.0], &[1.0], &[1.0]);
        let mut teacher = init_teacher(&tp, &ts);
        assert!(ema_update(&mut teacher, &sp, &ss, &EmaConfig::default()).is_err());
        assert!(ema_update(&mut teacher, &tp, &ts, &EmaConfig { alpha: 1.0, ema_bn: true }).is_err());
    }

    proptest! {
        #[test]
        fn updates_are_convex(t in -5.0f64..5.0, s in -5.0f64..5.0, tv in 0.0f64..5.0, sv in 0.0f64..5.0, alpha in 0.0f64..0.999) {
            let (tp, ts) = state(&[t], &[t], &[tv]);
            let (sp, ss) = state(&[s], &[s], &[sv]);
            let mut teacher = init_teacher(&tp, &ts);
            ema_update(&mut teacher, &sp, &ss, &EmaConfig { alpha, ema_bn: true }).unwrap();
            let v = teacher.params.iter().next().unwrap().data[0];
            prop_assert!(v >= t.min(s) - 1e-12 && v <= t.max(s) + 1e-12);
            prop_assert!(teacher.stats.layers[0].var[0] >= 0.0);
        }
    }
}
