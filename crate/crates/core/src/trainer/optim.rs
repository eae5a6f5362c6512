//! AdamW with decoupled weight decay and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate at step 0 to zero at the horizon.
    Cosine,
}

/// Learning rate for `step` of a run lasting `horizon` steps.
pub fn learning_rate(base: f64, schedule: Schedule, step: u64, horizon: u64) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            if horizon == 0 {
                return base;
            }
            let frac = (step.min(horizon) as f64) / horizon as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for every parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &Parameters<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update with bias correction:
/// `p ← p(1 − lr·wd)`, then `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn optimizer_update<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut Parameters<S>,
    grads: &Gradients<S>,
    lr: f64,
    cfg: &AdamW,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let one = S::one();
    let bc1 = one - S::of(cfg.beta1.powi(t));
    let bc2 = one - S::of(cfg.beta2.powi(t));
    let lr_s = S::of(lr);
    let decay = one - S::of(lr * cfg.weight_decay);
    let eps = S::of(cfg.eps);
    for id in 0..params.len() {
        let Some(g) = grads.get(id) else { continue };
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            if cfg.weight_decay != 0.0 {
                p[i] *= decay;
            }
            p[i] -= lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale_all(S::of(max_norm / (norm + 1e-6)));
    }
    norm
}
