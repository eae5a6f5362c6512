//! One training step of the combined objective.

use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::loop_dist::LoopDistribution;
use super::losses::{jsrr_loss, l2_consistency_loss, sft_loss};
use super::optim::{clip_global_norm, learning_rate, optimizer_update, AdamW, OptimizerState, Schedule};
use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::model::{Bound, Parameters};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveForm {
    /// `(1 − λ)·SFT + λ·JSRR`
    Convex,
    /// `SFT + λ·JSRR`
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Every next-token position inside the sample.
    All,
    /// Only positions that predict answer digits and the end token.
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda_weight: f64,
    #[serde(default = "defaults::form")]
    pub objective_form: ObjectiveForm,
    #[serde(default = "defaults::power_steps")]
    pub power_steps: usize,
    #[serde(default = "defaults::loop_dist")]
    pub loop_dist: LoopDistribution,
    #[serde(default)]
    pub l2_consistency_weight: f64,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::schedule")]
    pub schedule: Schedule,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps_opt")]
    pub eps_opt: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::detach")]
    pub detach_direction: bool,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "defaults::loss_mask")]
    pub loss_mask: LossMask,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    #[serde(default)]
    pub checkpoint_every: u64,
}

mod defaults {
    use super::*;
    pub fn lambda() -> f64 {
        0.1
    }
    pub fn form() -> ObjectiveForm {
        ObjectiveForm::Convex
    }
    pub fn power_steps() -> usize {
        1
    }
    pub fn loop_dist() -> LoopDistribution {
        LoopDistribution::log_normal(2.0, 0.7, 1, 100)
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn schedule() -> Schedule {
        Schedule::Cosine
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps_opt() -> f64 {
        1e-8
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn steps() -> u64 {
        1000
    }
    pub fn detach() -> bool {
        true
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn loss_mask() -> LossMask {
        LossMask::All
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_weight) {
            return Err(Error::Config(format!("lambda_weight {} outside [0, 1]", self.lambda_weight)));
        }
        if self.power_steps == 0 {
            return Err(Error::Config("power_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.l2_consistency_weight < 0.0 || !self.l2_consistency_weight.is_finite() {
            return Err(Error::Config("l2_consistency_weight must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loop_dist.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_opt,
            weight_decay: self.weight_decay,
        }
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        learning_rate(self.learning_rate, self.schedule, step, self.steps)
    }
}

/// Quantities logged for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub sampled_t: usize,
    pub sft_loss: f64,
    pub jsrr_loss: Option<f64>,
    pub l2_loss: Option<f64>,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub gradient_norm: f64,
    pub learning_rate: f64,
    /// Mean `‖J v‖` from the JSRR power step, when computed.
    pub rho_probe: Option<f64>,
}

/// Model parameters with their optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub params: Parameters<S>,
    pub optimizer: OptimizerState<S>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(params: Parameters<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&params);
        Ok(Trainer {
            params,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Depth used by step `step`.
    pub fn sample_depth(&self, step: u64) -> usize {
        let mut r = rng::step_stream(self.config.seed, rng::LOOP_SAMPLING, step);
        self.config.loop_dist.sample(&mut r)
    }

    /// Combined-objective step: sample `t`, forward, backward, update.
    pub fn stars_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step;
        let t = self.sample_depth(step);
        let cfg = &self.config;
        let mut dir_rng = rng::step_stream(cfg.seed, rng::JSRR_DIRECTION, step);
        let mut g = Graph::new();
        let bound = Bound::new(&self.params, &mut g);
        let record = cfg.l2_consistency_weight > 0.0;
        let (logits, states) = bound
            .forward(&mut g, &batch.tokens, batch.batch, batch.seq_len, t, record)
            .map_err(|e| numeric(e, step))?;
        let h_t = *states.last().expect("final state");
        let sft = sft_loss(&mut g, logits, batch).map_err(|e| numeric(e, step))?;
        let mut total = sft;
        let mut metrics = StepMetrics {
            step,
            sampled_t: t,
            sft_loss: g.value(sft).item().to_f64_lossy(),
            jsrr_loss: None,
            l2_loss: None,
            total_loss: 0.0,
            gradient_norm: 0.0,
            learning_rate: cfg.learning_rate_at(step),
            rho_probe: None,
        };
        let lambda = cfg.lambda_weight;
        if lambda > 0.0 {
            let j = jsrr_loss(
                &mut g,
                |g, x| bound.recurrent_block(g, x),
                h_t,
                cfg.power_steps,
                &mut dir_rng,
                cfg.detach_direction,
            )
            .map_err(|e| numeric(e, step))?;
            metrics.jsrr_loss = Some(g.value(j.loss).item().to_f64_lossy());
            metrics.rho_probe = Some(mean_sample_norm(g.value(j.tangent)));
            let l = S::of(lambda);
            let weighted = g.scale(j.loss, l)?;
            total = match cfg.objective_form {
                ObjectiveForm::Convex => {
                    let s = g.scale(sft, S::one() - l)?;
                    g.add(s, weighted)?
                }
                ObjectiveForm::Additive => g.add(sft, weighted)?,
            };
        }
        // The penalty needs two transitions; shallower draws skip it.
        if record && states.len() >= 3 {
            let l2 = l2_consistency_loss(&mut g, &states).map_err(|e| numeric(e, step))?;
            metrics.l2_loss = Some(g.value(l2).item().to_f64_lossy());
            let w = g.scale(l2, S::of(cfg.l2_consistency_weight))?;
            total = g.add(total, w).map_err(|e| numeric(e, step))?;
        }
        metrics.total_loss = g.value(total).item().to_f64_lossy();
        let grads = g.backward(total)?;
        drop(g);
        self.apply(grads, &mut metrics)?;
        Ok(metrics)
    }

    /// Plain next-token step at a fixed depth.
    pub fn sft_step(&mut self, batch: &Batch, t: usize) -> Result<StepMetrics> {
        let step = self.step;
        let mut g = Graph::new();
        let bound = Bound::new(&self.params, &mut g);
        let (logits, _) = bound
            .forward(&mut g, &batch.tokens, batch.batch, batch.seq_len, t, false)
            .map_err(|e| numeric(e, step))?;
        let loss = sft_loss(&mut g, logits, batch).map_err(|e| numeric(e, step))?;
        let value = g.value(loss).item().to_f64_lossy();
        let mut metrics = StepMetrics {
            step,
            sampled_t: t,
            sft_loss: value,
            jsrr_loss: None,
            l2_loss: None,
            total_loss: value,
            gradient_norm: 0.0,
            learning_rate: self.config.learning_rate_at(step),
            rho_probe: None,
        };
        let grads = g.backward(loss)?;
        drop(g);
        self.apply(grads, &mut metrics)?;
        Ok(metrics)
    }

    fn apply(&mut self, mut grads: Gradients<S>, metrics: &mut StepMetrics) -> Result<()> {
        let step = self.step;
        if !metrics.total_loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        metrics.gradient_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let opt = self.config.optimizer();
        optimizer_update(&mut self.optimizer, &mut self.params, &grads, metrics.learning_rate, &opt)?;
        self.step += 1;
        Ok(())
    }
}

fn numeric(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

fn mean_sample_norm<S: Scalar>(t: &crate::tensor::Tensor<S>) -> f64 {
    let b = t.shape().first().copied().unwrap_or(1).max(1);
    let chunk = t.numel() / b;
    t.data()
        .chunks(chunk.max(1))
        .map(|c| c.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / b as f64
}
