//! Power-iteration estimate of the Jacobian spectral radius of a map.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to norms before dividing.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProbe {
    /// `‖J v‖` from the last power step.
    pub rho_estimate: f64,
    pub k_steps: usize,
    /// Final unit direction.
    #[serde(skip)]
    pub direction: Vec<f64>,
    /// Loop index of the probed state.
    pub at_iteration: usize,
}

/// Draw one standard normal direction per sample and normalise each.
/// `x` is split into `samples` equal contiguous chunks.
pub fn random_directions<S: Scalar>(shape: &[usize], samples: usize, rng: &mut rng::Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let raw: Vec<S> = (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
    normalize_chunks(&Tensor::from_parts(shape.to_vec(), raw), samples).0
}

/// `v / (‖v‖ + ε)` per chunk; also returns the chunk norms.
pub fn normalize_chunks<S: Scalar>(v: &Tensor<S>, samples: usize) -> (Tensor<S>, Vec<f64>) {
    let chunk = v.numel() / samples.max(1);
    let mut out = v.clone();
    let mut norms = Vec::with_capacity(samples);
    for part in out.data_mut().chunks_mut(chunk.max(1)) {
        let norm = part.iter().map(|&x| x * x).sum::<S>().sqrt();
        let scale = S::one() / (norm + S::of(NORM_GUARD));
        part.iter_mut().for_each(|x| *x *= scale);
        norms.push(norm.to_f64_lossy());
    }
    (out, norms)
}

/// Outcome of a power iteration over a batch of independent samples.
#[derive(Debug, Clone)]
pub struct PowerIteration<S> {
    /// `‖J v‖` per sample from the final step.
    pub rho: Vec<f64>,
    /// Final directions, unit per sample.
    pub direction: Tensor<S>,
}

/// Run `k` power steps of the Jacobian of `map` at `state`, starting from
/// `v0`. `state` holds `samples` independent inputs along its first axis;
/// each gets its own direction and estimate. Evaluation only: the graph is
/// scratch and discarded.
pub fn power_iteration<S, F>(map: F, state: &Tensor<S>, v0: &Tensor<S>, k: usize, samples: usize) -> Result<PowerIteration<S>>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
{
    if k == 0 {
        return Err(Error::contract("power iteration needs k >= 1"));
    }
    if v0.shape() != state.shape() {
        return Err(Error::ShapeMismatch {
            op: "power_iteration",
            lhs: state.shape().to_vec(),
            rhs: v0.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(state.clone());
    let trace = g.trace(x, map)?;
    let mark = g.len();
    let mut v = v0.clone();
    let mut rho = vec![0.0; samples];
    for _ in 0..k {
        let tv = g.constant(v.clone());
        let j = g.push_tangent(&trace, tv)?;
        let jv = g.value(j).clone();
        g.truncate(mark);
        let (next, norms) = normalize_chunks(&jv, samples);
        rho = norms;
        // A zero Jacobian direction leaves v where it was.
        if rho.iter().all(|&r| r > 0.0) {
            v = next;
        } else {
            let chunk = v.numel() / samples;
            let mut merged = v.clone();
            let data = merged.data_mut();
            for (s, &r) in rho.iter().enumerate() {
                if r > 0.0 {
                    data[s * chunk..(s + 1) * chunk].copy_from_slice(&next.data()[s * chunk..(s + 1) * chunk]);
                }
            }
            v = merged;
        }
    }
    Ok(PowerIteration { rho, direction: v })
}

/// Probe the recurrent block of `params` at state `h: [M, d]`.
pub fn estimate_spectral_radius<S: Scalar>(
    params: &Parameters<S>,
    h: &Tensor<S>,
    k: usize,
    seed: u64,
    at_iteration: usize,
) -> Result<SpectralProbe> {
    let hb = match h.shape() {
        [m, d] => h.reshaped(&[1, *m, *d])?,
        [1, _, _] => h.clone(),
        other => {
            return Err(Error::ShapeMismatch {
                op: "estimate_spectral_radius",
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let mut r = rng::substream(seed, rng::JSRR_DIRECTION);
    let v0 = random_directions(hb.shape(), 1, &mut r);
    let out = block_power_iteration(params, &hb, &v0, k)?;
    Ok(SpectralProbe {
        rho_estimate: out.rho[0],
        k_steps: k,
        direction: out.direction.to_f64_vec(),
        at_iteration,
    })
}

/// Per-sample estimates for a batch of states `h: [B, M, d]`.
pub fn estimate_spectral_radius_batch<S: Scalar>(
    params: &Parameters<S>,
    h: &Tensor<S>,
    k: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<f64>> {
    let b = h.shape().first().copied().unwrap_or(1);
    let v0 = random_directions(h.shape(), b, rng);
    Ok(block_power_iteration(params, h, &v0, k)?.rho)
}

fn block_power_iteration<S: Scalar>(
    params: &Parameters<S>,
    h: &Tensor<S>,
    v0: &Tensor<S>,
    k: usize,
) -> Result<PowerIteration<S>> {
    let samples = h.shape()[0];
    power_iteration(
        |g, x| {
            let vars = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
            Bound::with_vars(params, vars).recurrent_block(g, x)
        },
        h,
        v0,
        k,
        samples,
    )
}
