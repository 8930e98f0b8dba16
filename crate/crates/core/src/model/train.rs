//! Two-stage training with Adam.
//!
//! A step draws `batch_size` segments per active corpus with a seeded ChaCha
//! generator. Per-segment gradients are computed in parallel and summed in
//! batch order, so the result does not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, Stage};
use super::{Model, ModelConfig};
use crate::dataset::TrainingSegment;
use crate::error::{Error, Result};

/// `α · L1 + (1 − α) · L2`.
pub fn finetune_loss(l1: f64, l2: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l1 + (1.0 - alpha) * l2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Invoke the checkpoint callback every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Permit fine-tuning from random initialization.
    pub allow_scratch_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            alpha: 0.25,
            steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            checkpoint_every: None,
            allow_scratch_finetune: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("learning rate and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid Adam hyperparameters"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Piano-only segments (S̄) and paired segments (S).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub piano_only: Vec<TrainingSegment>,
    pub paired: Vec<TrainingSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub trajectory: Vec<StepRecord>,
}

/// Pooled mean loss of a batch and the gradient of `weight × loss`.
fn batch_grad(model: &Model, batch: &[&TrainingSegment], weight: f64) -> Result<(f64, Vec<f64>)> {
    let count: usize = batch.iter().map(|s| s.masked_count()).sum();
    if count == 0 {
        return Err(Error::invalid("batch has no target positions"));
    }
    let scale = weight / count as f64;
    let parts: Vec<(f64, usize, Vec<f64>)> =
        batch.par_iter().map(|seg| model.loss_and_grad(seg, scale)).collect::<Result<_>>()?;
    let mut grad = vec![0.0; model.params.len()];
    let mut total = 0.0;
    for (nll, _, g) in &parts {
        total += nll;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((total / count as f64, grad))
}

fn draw<'a, R: Rng>(rng: &mut R, pool: &'a [TrainingSegment], n: usize) -> Vec<&'a TrainingSegment> {
    (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

/// Runs `cfg.steps` optimizer steps of the given stage.
///
/// Pre-training optimizes L1 on piano-only segments. Fine-tuning optimizes
/// `α·L1 + (1−α)·L2` with one piano-only batch and one paired batch per step
/// and needs a pre-trained `init` unless `allow_scratch_finetune` is set.
pub fn train(
    mode: TrainMode,
    corpus: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<ModelCheckpoint>,
    mut on_checkpoint: impl FnMut(&ModelCheckpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let target_stage = match mode {
        TrainMode::Pretrain => Stage::Pretrained,
        TrainMode::Finetune => Stage::Finetuned,
    };
    let (mut model, mut adam, mut step) = match init {
        Some(ck) => {
            if ck.config != *model_config {
                return Err(Error::Checkpoint("initial checkpoint was trained with a different model config".into()));
            }
            if mode == TrainMode::Pretrain && ck.stage == Stage::Finetuned {
                return Err(Error::Checkpoint("cannot pre-train from a fine-tuned checkpoint".into()));
            }
            // a stage change starts a fresh optimizer
            let adam = match (ck.stage == target_stage, ck.optimizer) {
                (true, Some(a)) => a,
                _ => AdamState::new(ck.params.len()),
            };
            let step = if ck.stage == target_stage { ck.step } else { 0 };
            (Model::from_params(ck.config, ck.params)?, adam, step)
        }
        None => {
            if mode == TrainMode::Finetune && !cfg.allow_scratch_finetune {
                return Err(Error::Checkpoint(
                    "fine-tuning needs a pre-trained checkpoint (or an explicit from-scratch override)".into(),
                ));
            }
            let model = Model::new(model_config.clone(), cfg.seed)?;
            let n = model.params.len();
            (model, AdamState::new(n), 0)
        }
    };

    let (w1, w2) = match mode {
        TrainMode::Pretrain => (1.0, 0.0),
        TrainMode::Finetune => (cfg.alpha, 1.0 - cfg.alpha),
    };
    if w1 > 0.0 && corpus.piano_only.is_empty() {
        return Err(Error::invalid("piano-only corpus is empty"));
    }
    if w2 > 0.0 && corpus.paired.is_empty() {
        return Err(Error::invalid("paired corpus is empty"));
    }
    let stream = match mode {
        TrainMode::Pretrain => 0x5052_4554,
        TrainMode::Finetune => 0x4649_4e45,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));

    let mut trajectory = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; model.params.len()];
        let mut l1 = None;
        let mut l2 = None;
        if w1 > 0.0 {
            let batch = draw(&mut rng, &corpus.piano_only, cfg.batch_size);
            let (l, g) = batch_grad(&model, &batch, w1)?;
            l1 = Some(l);
            grad = g;
        }
        if w2 > 0.0 {
            let batch = draw(&mut rng, &corpus.paired, cfg.batch_size);
            let (l, g) = batch_grad(&model, &batch, w2)?;
            l2 = Some(l);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let loss = match mode {
            TrainMode::Pretrain => l1.unwrap_or(0.0),
            TrainMode::Finetune => finetune_loss(l1.unwrap_or(0.0), l2.unwrap_or(0.0), cfg.alpha)?,
        };
        if !loss.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {step}")));
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam.update(&mut model.params, &grad, cfg);
        step += 1;
        trajectory.push(StepRecord { step, loss, l1, l2 });
        log::debug!("step {step} loss {loss:.6}");
        if cfg.checkpoint_every.is_some_and(|n| n > 0 && step % n as u64 == 0) {
            on_checkpoint(&ModelCheckpoint::new(&model, target_stage, step, cfg.seed, Some(adam.clone())))?;
        }
    }
    let checkpoint = ModelCheckpoint::new(&model, target_stage, step, cfg.seed, Some(adam));
    Ok(TrainOutcome { checkpoint, trajectory })
}
