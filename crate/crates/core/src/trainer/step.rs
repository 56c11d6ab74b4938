use serde::{Deserialize, Serialize};

use super::config::{poly_lr, TrainConfig};
use super::optim::sgd_step;
use crate::augment::{
    apply_geom, build_views, center_geom, mix_pseudo_labels, sample_geom, splice_planes, AugConfig, View,
};
use crate::ema::{ema_update, init_teacher, TeacherState};
use crate::error::{Error, Result};
use crate::losses::{confidence_mask, consistency_loss, loss_by_type, ramp_weight, total_loss, RampSchedule};
use crate::model::{argmax_labels, one_hot, softmax_backward, softmax_probs, ForwardMode, NormStats, ParamSet, SegNet};
use crate::rng::{keyed_rng, Stream};
use crate::tensor::{ImageTensor, MaskTensor, PixelMask, Tensor4};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub iteration: u64,
    pub student: ParamSet,
    pub student_stats: NormStats,
    /// SGD momentum buffers, laid out like `student`.
    pub momentum: ParamSet,
    pub teacher: TeacherState,
}

impl TrainState {
    pub fn init(net: &SegNet, seed: u64) -> Self {
        let (student, student_stats) = net.init(seed);
        let teacher = init_teacher(&student, &student_stats);
        Self { iteration: 0, momentum: student.zeros_like(), student, student_stats, teacher }
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    /// Unlabeled-loss weight at this step.
    pub ramp_weight: f64,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    /// Fraction of unlabeled pixels passing the confidence threshold.
    pub mask_ratio: f64,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("StepLog serializes")
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log: StepLog,
    /// Gradient of the total loss that was applied this step.
    pub grads: ParamSet,
}

/// Network plus the derived schedules of a run; stateless across steps.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: TrainConfig,
    net: SegNet,
    ramp: RampSchedule,
    aug: AugConfig,
}

fn stack(images: &[&ImageTensor]) -> Result<Tensor4> {
    Tensor4::from_images(images)
}

impl Learner {
    pub fn new(cfg: TrainConfig, net: SegNet, n_labeled: usize) -> Result<Self> {
        cfg.validate()?;
        let ramp = cfg.ramp(n_labeled);
        let aug = cfg.augment();
        Ok(Self { cfg, net, ramp, aug })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn ramp(&self) -> &RampSchedule {
        &self.ramp
    }

    fn weak_labeled(&self, t: u64, batch: &[(&ImageTensor, &MaskTensor)]) -> Result<(Tensor4, Tensor4)> {
        let mut rng = keyed_rng(self.cfg.seed, Stream::Augment as u64, 2 * t);
        let crop = self.aug.crop;
        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for (img, mask) in batch {
            let shape = (img.height, img.width);
            let geom = if self.aug.geometric { sample_geom(&mut rng, shape, crop)? } else { center_geom(shape, crop)? };
            let (i, m) = apply_geom(img, Some(mask), &geom)?;
            images.push(i);
            masks.push(m.expect("mask requested"));
        }
        let x = stack(&images.iter().collect::<Vec<_>>())?;
        let y = one_hot(&masks.iter().collect::<Vec<_>>(), self.net.config().num_classes)?;
        Ok((x, y))
    }

    /// Pseudo-target and pixel mask aligned with each strong view.
    fn pseudo_targets(&self, probs: &Tensor4, conf: &PixelMask, views: &[View]) -> Result<(Tensor4, PixelMask)> {
        let (n, k, h, w) = (probs.n, probs.c, probs.h, probs.w);
        let hw = h * w;
        let conf_of = |i: usize| &conf.data[i * hw..(i + 1) * hw];
        let mut mask = PixelMask::zeros(n, h, w);
        if self.cfg.hard_labels {
            let labels = argmax_labels(probs);
            let mut mixed: Vec<MaskTensor> = Vec::with_capacity(n);
            for (i, view) in views.iter().enumerate() {
                let plan = view.record.paste.as_ref();
                let src = plan.map_or(i, |p| p.source_batch_index);
                let (l, c) = mix_pseudo_labels(&labels[i], conf_of(i), &labels[src], conf_of(src), plan)?;
                mask.data[i * hw..(i + 1) * hw].copy_from_slice(&c);
                mixed.push(l);
            }
            return Ok((one_hot(&mixed.iter().collect::<Vec<_>>(), k)?, mask));
        }
        let mut target = Tensor4::zeros(n, k, h, w);
        for (i, view) in views.iter().enumerate() {
            match &view.record.paste {
                Some(plan) => {
                    let j = plan.source_batch_index;
                    for c in 0..k {
                        let a = &probs.sample(i)[c * hw..(c + 1) * hw];
                        let b = &probs.sample(j)[c * hw..(c + 1) * hw];
                        let s = splice_planes(a, b, h, w, &plan.region)?;
                        target.sample_mut(i)[c * hw..(c + 1) * hw].copy_from_slice(&s);
                    }
                    let c = splice_planes(conf_of(i), conf_of(j), h, w, &plan.region)?;
                    mask.data[i * hw..(i + 1) * hw].copy_from_slice(&c);
                }
                None => {
                    target.sample_mut(i).copy_from_slice(probs.sample(i));
                    mask.data[i * hw..(i + 1) * hw].copy_from_slice(conf_of(i));
                }
            }
        }
        Ok((target, mask))
    }

    /// One optimization step on `state`. Batches hold the raw (un-augmented)
    /// samples; all augmentation randomness is keyed by `(seed, iteration)`.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        labeled: &[(&ImageTensor, &MaskTensor)],
        unlabeled: &[&ImageTensor],
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let net = &self.net;
        let t = state.iteration;
        if labeled.is_empty() || unlabeled.is_empty() {
            return Err(Error::Shape("train_step needs nonempty labeled and unlabeled batches".into()));
        }

        // Supervised branch on weakly augmented labeled data.
        let (x, y) = self.weak_labeled(t, labeled)?;
        let out = net.forward(&state.student, &mut state.student_stats, &x, ForwardMode::Train)?;
        let probs = softmax_probs(&out.logits);
        let sup = loss_by_type(cfg.sup_loss, &probs, &y, None, false)?;
        let tape = out.tape.expect("train forward records a tape");
        let mut grads = net.backward(&state.student, tape, &softmax_backward(&probs, &sup.grad))?;

        // Weak/strong views with shared geometry.
        let mut rng = keyed_rng(cfg.seed, Stream::Augment as u64, 2 * t + 1);
        let views = build_views(unlabeled, &mut rng, &self.aug)?;
        let weak = stack(&views.iter().map(|v| &v.weak).collect::<Vec<_>>())?;
        let strong = stack(&views.iter().map(|v| &v.strong).collect::<Vec<_>>())?;

        // Pseudo-labels from the teacher (or the student itself) on weak views.
        let (src_params, src_stats) = if cfg.ema_teacher {
            (&state.teacher.params, &state.teacher.stats)
        } else {
            (&state.student, &state.student_stats)
        };
        let teacher_probs = softmax_probs(&net.forward_eval(src_params, src_stats, &weak)?);
        let conf = if cfg.use_threshold {
            confidence_mask(&teacher_probs, cfg.tau)
        } else {
            PixelMask::ones(weak.n, weak.h, weak.w)
        };
        let mask_ratio = conf.ratio();
        let (target, mask) = self.pseudo_targets(&teacher_probs, &conf, &views)?;

        // Consistency branch on strong views.
        let out = net.forward(&state.student, &mut state.student_stats, &strong, ForwardMode::Train)?;
        let student_probs = softmax_probs(&out.logits);
        let cons = consistency_loss(&student_probs, &target, &mask, &cfg.consistency())?;
        let weight = ramp_weight(t, &self.ramp);
        let total = total_loss(sup.value, cons.value, weight);
        let lr = poly_lr(t, cfg.iterations, cfg.lr0, cfg.poly_power);
        let log = StepLog {
            iteration: t,
            lr,
            ramp_weight: weight,
            loss_sup: sup.value,
            loss_cons: cons.value,
            loss_total: total,
            mask_ratio,
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { log: Box::new(log), dump: None });
        }
        if weight != 0.0 {
            let mut g = softmax_backward(&student_probs, &cons.grad);
            g.data.iter_mut().for_each(|v| *v *= weight);
            let tape = out.tape.expect("train forward records a tape");
            let unlabeled_grads = net.backward(&state.student, tape, &g)?;
            for (a, b) in grads.iter_mut().zip(unlabeled_grads.iter()) {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
            }
        }

        sgd_step(&mut state.student, &grads, &mut state.momentum, lr, cfg.momentum, cfg.weight_decay)?;
        if cfg.extra_weak {
            net.forward(&state.student, &mut state.student_stats, &weak, ForwardMode::StatsOnly)?;
        }
        if cfg.ema_teacher {
            ema_update(&mut state.teacher, &state.student, &state.student_stats, &cfg.ema())?;
        }
        state.iteration += 1;
        Ok(StepOutput { log, grads })
    }
}
