//! Evaluation-only passes on plain tensors. Each stage runs on a scratch
//! graph that is dropped immediately, so long loops use bounded memory.

use serde::Serialize;

use super::block::Bound;
use super::params::Parameters;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent states `h^(0)..h^(T)` of one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<S> {
    #[serde(skip)]
    pub states: Vec<Tensor<S>>,
    pub input_tokens: Vec<usize>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of loop applications `T` (one less than the state count).
    pub fn depth(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&Tensor<S>> {
        self.states.last()
    }
}

fn as_batch<S: Scalar>(h: &Tensor<S>) -> Result<(Tensor<S>, bool)> {
    match h.shape() {
        [m, d] => Ok((h.reshaped(&[1, *m, *d])?, true)),
        [_, _, _] => Ok((h.clone(), false)),
        other => Err(Error::ShapeMismatch {
            op: "recurrent_block",
            lhs: other.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// Apply the shared recurrent block once to `h: [M, d]` or `[B, M, d]`.
pub fn recurrent_block<S: Scalar>(params: &Parameters<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
    let (hb, single) = as_batch(h)?;
    if hb.shape()[1] > params.config().max_seq_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            hb.shape()[1],
            params.config().max_seq_len
        )));
    }
    if !hb.is_finite() {
        return Err(Error::contract("recurrent_block input must be finite"));
    }
    let mut g = Graph::new();
    let bound = Bound::new(params, &mut g);
    let x = g.constant(hb);
    let y = bound.recurrent_block(&mut g, x)?;
    let out = g.value(y).clone();
    if single {
        out.reshaped(h.shape())
    } else {
        Ok(out)
    }
}

/// Initial latent state `h^(0)` for row-major `tokens: [batch, seq_len]`.
pub fn embed<S: Scalar>(params: &Parameters<S>, tokens: &[usize], batch: usize, seq_len: usize) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let bound = Bound::new(params, &mut g);
    let h = bound.prelude(&mut g, tokens, batch, seq_len)?;
    Ok(g.value(h).clone())
}

/// Logits `[B, M, V]` from a latent state `[B, M, d]`.
pub fn head<S: Scalar>(params: &Parameters<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
    let (hb, _) = as_batch(h)?;
    let mut g = Graph::new();
    let bound = Bound::new(params, &mut g);
    let x = g.constant(hb);
    let y = bound.coda_head(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Run a batch to depth `t`, calling `visit(k, h^(k))` for every state.
pub fn run_batch<S: Scalar>(
    params: &Parameters<S>,
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    t: usize,
    mut visit: impl FnMut(usize, &Tensor<S>),
) -> Result<Tensor<S>> {
    let mut h = embed(params, tokens, batch, seq_len)?;
    visit(0, &h);
    for k in 1..=t {
        h = recurrent_block(params, &h)?;
        visit(k, &h);
    }
    Ok(h)
}

/// Forward pass of a single sequence to depth `t`. Returns logits `[M, V]`
/// and, when `record` is set, the full trajectory.
pub fn forward<S: Scalar>(
    params: &Parameters<S>,
    tokens: &[usize],
    t: usize,
    record: bool,
) -> Result<(Tensor<S>, Option<Trajectory<S>>)> {
    let m = tokens.len();
    let mut states = Vec::new();
    let h = run_batch(params, tokens, 1, m, t, |_, h| {
        if record {
            states.push(h.reshaped(&[m, h.shape()[2]]).expect("same size"));
        }
    })?;
    let logits = head(params, &h)?;
    let logits = logits.reshaped(&[m, params.config().vocab_size])?;
    let traj = record.then(|| Trajectory {
        states,
        input_tokens: tokens.to_vec(),
    });
    Ok((logits, traj))
}
