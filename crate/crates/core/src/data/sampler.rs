//! Labeled/unlabeled batch planning.
//!
//! Both index streams are concatenations of independently shuffled
//! permutations, so after any prefix the per-index usage counts differ by at
//! most one. The strategy decides which set defines an epoch: with
//! [`SamplingStrategy::OversampleLabeled`] an epoch is one pass over the
//! unlabeled set while labeled indices are recycled; with
//! [`SamplingStrategy::UndersampleUnlabeled`] an epoch is one pass over the
//! labeled set and only a slice of the unlabeled pool is visited per epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    OversampleLabeled,
    UndersampleUnlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    /// Labeled batch size `B`.
    pub batch_labeled: usize,
    /// Unlabeled batch is `size_ratio * batch_labeled`.
    pub size_ratio: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn batch_unlabeled(&self) -> usize {
        self.batch_labeled * self.size_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub steps: Vec<PlanStep>,
    pub iterations_per_epoch: usize,
}

impl EpochPlan {
    /// How often each labeled index is used over the whole plan.
    pub fn labeled_counts(&self, n_labeled: usize) -> Vec<usize> {
        let mut c = vec![0; n_labeled];
        for s in &self.steps {
            for &i in &s.labeled {
                c[i] += 1;
            }
        }
        c
    }

    pub fn unlabeled_counts(&self, n_unlabeled: usize) -> Vec<usize> {
        let mut c = vec![0; n_unlabeled];
        for s in &self.steps {
            for &i in &s.unlabeled {
                c[i] += 1;
            }
        }
        c
    }
}

struct PermutationCycle {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl PermutationCycle {
    fn new(n: usize, rng: Rng) -> Self {
        Self { rng, order: (0..n).collect(), pos: n }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}

pub fn make_epoch_plan(
    cfg: &SamplerConfig,
    n_labeled: usize,
    n_unlabeled: usize,
    total_iterations: usize,
) -> Result<EpochPlan> {
    if n_labeled == 0 || n_unlabeled == 0 {
        return Err(Error::Config(format!(
            "epoch plan needs at least one labeled and one unlabeled sample (got {n_labeled}/{n_unlabeled})"
        )));
    }
    if cfg.batch_labeled == 0 || cfg.size_ratio == 0 {
        return Err(Error::Config("batch_labeled and size_ratio must be >= 1".into()));
    }
    let b = cfg.batch_labeled;
    let ub = cfg.batch_unlabeled();
    let iterations_per_epoch = match cfg.strategy {
        SamplingStrategy::OversampleLabeled => n_unlabeled.div_ceil(ub),
        SamplingStrategy::UndersampleUnlabeled => n_labeled.div_ceil(b),
    };
    let mut labeled = PermutationCycle::new(n_labeled, keyed_rng(cfg.seed, Stream::Data as u64, 0));
    let mut unlabeled = PermutationCycle::new(n_unlabeled, keyed_rng(cfg.seed, Stream::Data as u64, 1));
    let steps =
        (0..total_iterations).map(|_| PlanStep { labeled: labeled.take(b), unlabeled: unlabeled.take(ub) }).collect();
    Ok(EpochPlan { steps, iterations_per_epoch })
}
