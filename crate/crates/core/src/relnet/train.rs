//! Mini-batch SGD with momentum, weight decay and staged learning-rate drops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::scene::Scene;

use super::loss::{batch_loss_gradients, LossTerms};
use super::RelNetParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub lr_drops: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub gamma: f64,
    pub include_unary: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_iterations(60_000)
    }
}

impl TrainConfig {
    /// Default optimizer settings with drops at 1/3 and 2/3 of `iterations`.
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            learning_rate: 0.005,
            lr_drops: vec![iterations / 3, 2 * iterations / 3],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            iterations,
            gamma: 1.0,
            include_unary: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.gamma < 0.0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "learning rate must be positive; weight decay and gamma non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| step >= d).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

/// Mean batch loss recorded before every optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// One momentum-SGD update: `v = mu v + g + wd theta; theta -= lr v`.
pub(crate) fn sgd_step(
    params: &mut RelNetParams,
    velocity: &mut RelNetParams,
    grad: &RelNetParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let ps = params.arrays_mut();
    let vs = velocity.arrays_mut();
    for ((p, v), g) in ps.into_iter().zip(vs).zip(grad.arrays()) {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
}

/// Trains the relation net by pseudo-likelihood on seen-labeled scenes.
///
/// `unary`, when given, holds per-scene, per-region log-probabilities over the
/// full label space and is only used if `tc.include_unary` is set.
pub fn train_relnet(
    dataset: &[Scene],
    unary: Option<&[Vec<Vec<f64>>]>,
    terms: LossTerms<'_>,
    init: RelNetParams,
    tc: &TrainConfig,
    exec: Exec,
) -> Result<(RelNetParams, TrainLog)> {
    tc.validate()?;
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if tc.include_unary && unary.is_none() {
        return Err(Error::Invalid("include_unary requires unary log-probabilities".into()));
    }
    let terms = LossTerms { gamma: tc.gamma, ..terms };
    let unary = if tc.include_unary { unary } else { None };

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut params = init;
    let mut velocity = params.zeros_like();
    let mut log = TrainLog::default();

    for step in 0..tc.iterations {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let scenes: Vec<&Scene> = batch.iter().map(|&s| &dataset[s]).collect();
        let blocks: Option<Vec<&[Vec<f64>]>> =
            unary.map(|u| batch.iter().map(|&s| u[s].as_slice()).collect());
        let (loss, mut grad) =
            batch_loss_gradients(&scenes, blocks.as_deref(), &params, terms, exec)?;
        let mean = loss / tc.batch_size as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {step}")));
        }
        log.losses.push(mean);
        grad.scale(1.0 / tc.batch_size as f64);
        sgd_step(
            &mut params,
            &mut velocity,
            &grad,
            tc.lr_at(step),
            tc.momentum,
            tc.weight_decay,
        );
    }
    Ok((params, log))
}
