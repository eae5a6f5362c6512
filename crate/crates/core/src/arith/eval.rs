//! Exact-match evaluation and depth sweeps.

use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::vocab::ArithVocab;
use crate::dynamics::{convergence_report, estimate_spectral_radius_batch, mean_token_norm, ConvergenceReport, Thresholds};
use crate::error::{Error, Result};
use crate::model::{head, run_batch, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps a token batch and a depth to next-token logits.
pub trait LanguageModel<S: Scalar> {
    /// Logits `[batch, seq_len, V]` for row-major `tokens`.
    fn logits(&self, tokens: &[usize], batch: usize, seq_len: usize, t: usize) -> Result<Tensor<S>>;
}

impl<S: Scalar> LanguageModel<S> for Parameters<S> {
    fn logits(&self, tokens: &[usize], batch: usize, seq_len: usize, t: usize) -> Result<Tensor<S>> {
        let h = run_batch(self, tokens, batch, seq_len, t, |_, _| {})?;
        head(self, &h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Feed back the model's own argmax tokens after the prompt.
    Greedy,
    /// Score every answer token given the true prefix.
    TeacherForced,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Samples grouped by prompt length, keeping original order inside groups.
fn by_prompt_len(samples: &[Sample]) -> Vec<Vec<&Sample>> {
    let mut groups: Vec<Vec<&Sample>> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|g| g[0].prompt().len() == s.prompt().len()) {
            Some(g) => g.push(s),
            None => groups.push(vec![s]),
        }
    }
    groups
}

/// Greedy completion of each prompt at depth `t`, stopping at EOS or after
/// `budget` tokens. Returns the generated ids (without EOS) and whether EOS
/// was produced.
pub fn greedy_decode<S: Scalar, M: LanguageModel<S>>(
    model: &M,
    prompts: &[&[usize]],
    t: usize,
    budget: usize,
    eval_batch: usize,
) -> Result<Vec<(Vec<usize>, bool)>> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(eval_batch.max(1)) {
        let len = chunk[0].len();
        if chunk.iter().any(|p| p.len() != len) {
            return Err(Error::contract("greedy_decode needs equal prompt lengths per batch"));
        }
        let b = chunk.len();
        let mut rows: Vec<Vec<usize>> = chunk.iter().map(|p| p.to_vec()).collect();
        let mut done = vec![false; b];
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); b];
        for _ in 0..budget {
            if done.iter().all(|&d| d) {
                break;
            }
            let m = rows[0].len();
            let flat: Vec<usize> = rows.iter().flatten().copied().collect();
            let logits = model.logits(&flat, b, m, t)?;
            let v = logits.last_dim();
            for r in 0..b {
                let off = (r * m + m - 1) * v;
                let next = argmax(&logits.data()[off..off + v]);
                rows[r].push(next);
                if !done[r] {
                    if next == ArithVocab::EOS {
                        done[r] = true;
                    } else {
                        generated[r].push(next);
                    }
                }
            }
        }
        out.extend(generated.into_iter().zip(done));
    }
    Ok(out)
}

/// Fraction of samples whose answer is reproduced exactly at depth `t`.
pub fn exact_match_eval<S: Scalar, M: LanguageModel<S>>(
    model: &M,
    samples: &[Sample],
    t: usize,
    mode: DecodeMode,
    eval_batch: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("exact_match_eval needs at least one sample"));
    }
    let mut correct = 0usize;
    for group in by_prompt_len(samples) {
        match mode {
            DecodeMode::Greedy => {
                let budget = group.iter().map(|s| s.completion().len()).max().unwrap_or(1) + 1;
                let prompts: Vec<&[usize]> = group.iter().map(|s| s.prompt()).collect();
                let decoded = greedy_decode(model, &prompts, t, budget, eval_batch)?;
                for (s, (ids, eos)) in group.iter().zip(decoded) {
                    if eos && ids == s.token_ids[s.answer_span.clone()] {
                        correct += 1;
                    }
                }
            }
            DecodeMode::TeacherForced => {
                for chunk in group.chunks(eval_batch.max(1)) {
                    correct += teacher_forced_correct(model, chunk, t)?;
                }
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn teacher_forced_correct<S: Scalar, M: LanguageModel<S>>(model: &M, chunk: &[&Sample], t: usize) -> Result<usize> {
    let m = chunk.iter().map(|s| s.token_ids.len()).max().unwrap_or(0);
    let b = chunk.len();
    let mut flat = vec![ArithVocab::PAD; b * m];
    for (r, s) in chunk.iter().enumerate() {
        flat[r * m..r * m + s.token_ids.len()].copy_from_slice(&s.token_ids);
    }
    let logits = model.logits(&flat, b, m, t)?;
    let v = logits.last_dim();
    Ok(chunk
        .iter()
        .enumerate()
        .filter(|(r, s)| {
            (s.answer_span.start..s.token_ids.len()).all(|p| {
                let off = (r * m + p - 1) * v;
                argmax(&logits.data()[off..off + v]) == s.token_ids[p]
            })
        })
        .count())
}

/// One row of a depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: usize,
    pub exact_match_accuracy: f64,
    /// Mean per-token norm of `h^(t)` over prompt positions.
    pub mean_state_norm: f64,
    /// Mean per-token norm of `h^(t) - h^(t-1)` over prompt positions.
    pub mean_successive_delta: f64,
    /// Mean power-iteration estimate at `h^(t)`; absent when probing is off.
    pub mean_rho_estimate: Option<f64>,
}

pub const SWEEP_HEADER: &str = "t,exact_match_accuracy,mean_state_norm,mean_successive_delta,mean_rho_estimate";

impl SweepRow {
    pub fn csv(&self) -> String {
        let rho = self.mean_rho_estimate.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.t, self.exact_match_accuracy, self.mean_state_norm, self.mean_successive_delta, rho
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub mode: DecodeMode,
    pub eval_batch: usize,
    /// Power steps for the spectral column; 0 skips it.
    pub power_steps: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            mode: DecodeMode::Greedy,
            eval_batch: 128,
            power_steps: 20,
            seed: 0,
        }
    }
}

/// Accuracy and state statistics at each requested depth, in the given order.
pub fn eval_sweep<S: Scalar>(
    params: &Parameters<S>,
    samples: &[Sample],
    t_values: &[usize],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if t_values.is_empty() || t_values.contains(&0) {
        return Err(Error::contract("t_values must be nonempty and each >= 1"));
    }
    let max_t = *t_values.iter().max().expect("nonempty");
    let mut norms = vec![0.0; max_t + 1];
    let mut deltas = vec![0.0; max_t + 1];
    let mut rhos = vec![0.0; max_t + 1];
    let mut weight = 0usize;
    let mut probe_rng = rng::substream(opts.seed, rng::EVAL);
    for group in by_prompt_len(samples) {
        for chunk in group.chunks(opts.eval_batch.max(1)) {
            let m = chunk[0].prompt().len();
            let flat: Vec<usize> = chunk.iter().flat_map(|s| s.prompt().iter().copied()).collect();
            let mut prev: Option<Tensor<S>> = None;
            let mut err = None;
            run_batch(params, &flat, chunk.len(), m, max_t, |k, h| {
                let w = chunk.len() as f64;
                norms[k] += mean_token_norm(h) * w;
                if let Some(p) = &prev {
                    deltas[k] += mean_token_norm(&h.sub(p)) * w;
                }
                if opts.power_steps > 0 && k > 0 && t_values.contains(&k) && err.is_none() {
                    match estimate_spectral_radius_batch(params, h, opts.power_steps, &mut probe_rng) {
                        Ok(r) => rhos[k] += r.iter().sum::<f64>(),
                        Err(e) => err = Some(e),
                    }
                }
                prev = Some(h.clone());
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            weight += chunk.len();
        }
    }
    let w = weight.max(1) as f64;
    t_values
        .iter()
        .map(|&t| {
            Ok(SweepRow {
                t,
                exact_match_accuracy: exact_match_eval(params, samples, t, opts.mode, opts.eval_batch)?,
                mean_state_norm: norms[t] / w,
                mean_successive_delta: deltas[t] / w,
                mean_rho_estimate: (opts.power_steps > 0).then(|| rhos[t] / w),
            })
        })
        .collect()
}

/// Convergence verdict for each sample's prompt trajectory to depth `t`.
pub fn trajectory_reports<S: Scalar>(
    params: &Parameters<S>,
    samples: &[Sample],
    t: usize,
    eval_batch: usize,
    th: Thresholds,
) -> Result<Vec<ConvergenceReport>> {
    let mut out = Vec::with_capacity(samples.len());
    for group in by_prompt_len(samples) {
        for chunk in group.chunks(eval_batch.max(1)) {
            let m = chunk[0].prompt().len();
            let flat: Vec<usize> = chunk.iter().flat_map(|s| s.prompt().iter().copied()).collect();
            let mut per_sample: Vec<Vec<Tensor<S>>> = vec![Vec::with_capacity(t + 1); chunk.len()];
            run_batch(params, &flat, chunk.len(), m, t, |_, h| {
                for (r, states) in per_sample.iter_mut().enumerate() {
                    states.push(h.slice_first(r, r + 1));
                }
            })?;
            for states in per_sample {
                out.push(convergence_report(&states, th)?);
            }
        }
    }
    Ok(out)
}

/// Final prompt states `h^(t)` for `samples` (grouped by prompt length).
pub fn final_states<S: Scalar>(params: &Parameters<S>, samples: &[Sample], t: usize, eval_batch: usize) -> Result<Vec<Tensor<S>>> {
    let mut out = Vec::new();
    for group in by_prompt_len(samples) {
        for chunk in group.chunks(eval_batch.max(1)) {
            let m = chunk[0].prompt().len();
            let flat: Vec<usize> = chunk.iter().flat_map(|s| s.prompt().iter().copied()).collect();
            out.push(run_batch(params, &flat, chunk.len(), m, t, |_, _| {})?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Puts all mass on the true next token of a fixed set of samples.
    struct Oracle(Vec<Sample>);

    impl LanguageModel<f64> for Oracle {
        fn logits(&self, tokens: &[usize], batch: usize, seq_len: usize, _t: usize) -> Result<Tensor<f64>> {
            let v = ArithVocab::SIZE;
            let mut data = vec![0.0; batch * seq_len * v];
            for r in 0..batch {
                let row = &tokens[r * seq_len..(r + 1) * seq_len];
                let s = self.0.iter().find(|s| s.token_ids.starts_with(&row[..row.len().min(s.token_ids.len())]));
                for p in 0..seq_len {
                    let next = s.and_then(|s| s.token_ids.get(p + 1)).copied().unwrap_or(ArithVocab::EOS);
                    data[(r * seq_len + p) * v + next] = 20.0;
                }
            }
            Tensor::new(vec![batch, seq_len, v], data)
        }
    }

    #[test]
    fn oracle_model_is_perfect() {
        let samples: Vec<Sample> = [(12, 34), (99, 99), (50, 50)].iter().map(|&(a, b)| Sample::new(a, b).unwrap()).collect();
        let m = Oracle(samples.clone());
        for mode in [DecodeMode::Greedy, DecodeMode::TeacherForced] {
            assert_eq!(exact_match_eval(&m, &samples, 1, mode, 2).unwrap(), 1.0);
        }
    }

    #[test]
    fn sweep_rows_follow_request_order() {
        let cfg = ModelConfig::small(ArithVocab::SIZE, 12);
        let p = Parameters::<f64>::init(&cfg, 0).unwrap();
        let samples: Vec<Sample> = (10..14).map(|a| Sample::new(a, 21).unwrap()).collect();
        let opts = SweepOptions {
            power_steps: 2,
            ..SweepOptions::default()
        };
        let rows = eval_sweep(&p, &samples, &[3, 1], &opts).unwrap();
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![3, 1]);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.exact_match_accuracy));
            assert!(r.mean_rho_estimate.unwrap() >= 0.0);
        }
        assert!(eval_sweep(&p, &samples, &[], &opts).is_err());
        assert_eq!(SWEEP_HEADER.split(',').count(), 5);
    }
}
