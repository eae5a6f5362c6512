//! Training objectives recorded in the graph.

use crate::autodiff::{Graph, Var};
use crate::dynamics::random_directions;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::batch::Batch;

/// Mean over the batch of summed next-token negative log-likelihoods.
/// `logits: [B, M, V]`; row `(b, p)` is scored against token `(b, p + 1)`
/// when `batch.mask[b * M + p]` is set.
pub fn sft_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, batch: &Batch) -> Result<Var> {
    let (b, m) = (batch.batch, batch.seq_len);
    if batch.mask.iter().all(|&x| !x) {
        return Err(Error::contract("sft loss mask selects no positions"));
    }
    let w = S::one() / S::of(b as f64);
    let mut targets = vec![0usize; b * m];
    let mut weights = vec![S::zero(); b * m];
    for r in 0..b {
        for p in 0..m.saturating_sub(1) {
            let i = r * m + p;
            if batch.mask[i] {
                targets[i] = batch.tokens[i + 1];
                weights[i] = w;
            }
        }
    }
    g.cross_entropy(logits, &targets, &weights)
}

/// Mean over adjacent pairs of the batch-mean `‖h^(k+1) - h^(k)‖²`.
pub fn l2_consistency_loss<S: Scalar>(g: &mut Graph<S>, states: &[Var]) -> Result<Var> {
    if states.len() < 3 {
        return Err(Error::contract(format!(
            "L2 consistency needs depth t >= 2, got {}",
            states.len().saturating_sub(1)
        )));
    }
    let batch = g.shape(states[0]).first().copied().unwrap_or(1);
    let pairs = states.len() - 1;
    let mut total: Option<Var> = None;
    for w in states.windows(2) {
        let d = g.sub(w[1], w[0])?;
        let s = g.sq_norm(d)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    g.scale(total.expect("at least one pair"), S::of(1.0 / (batch * pairs) as f64))
}

/// Result of [`jsrr_loss`].
#[derive(Debug, Clone, Copy)]
pub struct Jsrr {
    /// Batch mean of `‖j‖²` for the final power step.
    pub loss: Var,
    /// Final tangent `j`, same shape as the probed state.
    pub tangent: Var,
}

/// Jacobian spectral-radius penalty of `map` at `h_t`.
///
/// One random unit direction per sample (first axis of `h_t`) is pushed
/// through `k` normalised tangent steps. The loss is differentiable through
/// the tangent rules, so gradients reach both the map's parameters and
/// `h_t`. With `detach_direction`, the intermediate renormalised directions
/// enter as constants.
pub fn jsrr_loss<S, F>(g: &mut Graph<S>, map: F, h_t: Var, k: usize, rng: &mut Rng, detach_direction: bool) -> Result<Jsrr>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
{
    if k == 0 {
        return Err(Error::contract("jsrr needs at least one power step"));
    }
    let shape = g.shape(h_t).to_vec();
    let samples = shape.first().copied().unwrap_or(1).max(1);
    let trace = g.trace(h_t, map)?;
    let v0: Tensor<S> = random_directions(&shape, samples, rng);
    let mut v = g.constant(v0);
    let mut j = g.push_tangent(&trace, v)?;
    for _ in 1..k {
        v = if detach_direction {
            let (next, _) = crate::dynamics::normalize_chunks(g.value(j), samples);
            g.constant(next)
        } else {
            normalize_in_graph(g, j, samples)?
        };
        j = g.push_tangent(&trace, v)?;
    }
    let sq = g.sq_norm(j)?;
    let loss = g.scale(sq, S::of(1.0 / samples as f64))?;
    Ok(Jsrr { loss, tangent: j })
}

/// `x / (‖x‖ + ε)` per sample, built from differentiable primitives.
fn normalize_in_graph<S: Scalar>(g: &mut Graph<S>, x: Var, samples: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let flat = g.reshape(x, &[samples, n / samples])?;
    let sq = g.mul(flat, flat)?;
    let s = g.sum_last(sq)?;
    let norm = g.pow(s, S::of(0.5))?;
    let guarded = g.add_scalar(norm, S::of(crate::dynamics::NORM_GUARD))?;
    let inv = g.pow(guarded, -S::one())?;
    let unit = g.mul_col(flat, inv)?;
    g.reshape(unit, &shape)
}
