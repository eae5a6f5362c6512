//! Random addition problems and their batching.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::ArithVocab;
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::{Batch, LossMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "two")]
    pub digits_a: u32,
    #[serde(default = "two")]
    pub digits_b: u32,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dedupe: bool,
}

fn two() -> u32 {
    2
}

fn default_samples() -> usize {
    20_000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            digits_a: 2,
            digits_b: 2,
            n_samples: default_samples(),
            seed: 0,
            dedupe: false,
        }
    }
}

/// Operands are limited so that sums fit in `u64`.
pub const MAX_DIGITS: u32 = 18;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for d in [self.digits_a, self.digits_b] {
            if d == 0 || d > MAX_DIGITS {
                return Err(Error::Config(format!("operand digit count {d} outside [1, {MAX_DIGITS}]")));
            }
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of distinct `(A, B)` pairs.
    pub fn task_size(&self) -> u128 {
        count(self.digits_a) * count(self.digits_b)
    }

    /// Token length of a prompt `BOS A + B =`.
    pub fn prompt_len(&self) -> usize {
        (self.digits_a + self.digits_b) as usize + 3
    }

    /// Longest possible answer in digits.
    pub fn max_answer_digits(&self) -> usize {
        self.digits_a.max(self.digits_b) as usize + 1
    }

    /// Longest encoded sample including BOS and EOS.
    pub fn max_len(&self) -> usize {
        self.prompt_len() + self.max_answer_digits() + 1
    }
}

fn count(digits: u32) -> u128 {
    9 * 10u128.pow(digits - 1)
}

fn range(digits: u32) -> (u64, u64) {
    (10u64.pow(digits - 1), 10u64.pow(digits) - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    /// Canonical `A+B=C`.
    pub text: String,
    /// `BOS text EOS`.
    pub token_ids: Vec<usize>,
    /// Positions of the digits of `C` in `token_ids`.
    pub answer_span: Range<usize>,
}

impl Sample {
    pub fn new(a: u64, b: u64) -> Result<Self> {
        let c = a
            .checked_add(b)
            .ok_or_else(|| Error::Config(format!("{a} + {b} overflows")))?;
        let text = format!("{a}+{b}={c}");
        let token_ids = ArithVocab.encode_sample(&text)?;
        let end = token_ids.len() - 1;
        let start = end - c.to_string().len();
        Ok(Sample {
            a,
            b,
            c,
            text,
            token_ids,
            answer_span: start..end,
        })
    }

    /// Parse `A+B=C`, checking the sum.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed sample {text:?}"));
        let (lhs, c) = text.split_once('=').ok_or_else(bad)?;
        let (a, b) = lhs.split_once('+').ok_or_else(bad)?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
        let s = Sample::new(num(a)?, num(b)?)?;
        if s.c != num(c)? || s.text != text {
            return Err(bad());
        }
        Ok(s)
    }

    /// `BOS A + B =`.
    pub fn prompt(&self) -> &[usize] {
        &self.token_ids[..self.answer_span.start]
    }

    /// Answer digits followed by EOS.
    pub fn completion(&self) -> &[usize] {
        &self.token_ids[self.answer_span.start..]
    }
}

/// Draw `spec.n_samples` problems from the data substream of `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    if spec.dedupe && spec.n_samples as u128 > spec.task_size() {
        return Err(Error::Capacity {
            requested: spec.n_samples as u128,
            available: spec.task_size(),
        });
    }
    let mut r = rng::substream(spec.seed, rng::DATA);
    let (alo, ahi) = range(spec.digits_a);
    let (blo, bhi) = range(spec.digits_b);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.n_samples);
    while out.len() < spec.n_samples {
        let a = r.random_range(alo..=ahi);
        let b = r.random_range(blo..=bhi);
        if spec.dedupe && !seen.insert((a, b)) {
            continue;
        }
        out.push(Sample::new(a, b)?);
    }
    Ok(out)
}

/// `n` distinct problems of the same shape that do not occur in `exclude`.
pub fn held_out(spec: &DatasetSpec, exclude: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut taken: HashSet<(u64, u64)> = exclude.iter().map(|s| (s.a, s.b)).collect();
    let available = spec.task_size() - taken.len() as u128;
    if n as u128 > available {
        return Err(Error::Capacity {
            requested: n as u128,
            available,
        });
    }
    let mut r = rng::substream(seed, rng::EVAL);
    let (alo, ahi) = range(spec.digits_a);
    let (blo, bhi) = range(spec.digits_b);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pair = (r.random_range(alo..=ahi), r.random_range(blo..=bhi));
        if taken.insert(pair) {
            out.push(Sample::new(pair.0, pair.1)?);
        }
    }
    Ok(out)
}

/// Pad samples to a common length and build the loss mask.
pub fn make_batch(samples: &[&Sample], mask: LossMask) -> Batch {
    let seq_len = samples.iter().map(|s| s.token_ids.len()).max().unwrap_or(0);
    let batch = samples.len();
    let mut tokens = vec![ArithVocab::PAD; batch * seq_len];
    let mut m = vec![false; batch * seq_len];
    for (r, s) in samples.iter().enumerate() {
        let n = s.token_ids.len();
        tokens[r * seq_len..r * seq_len + n].copy_from_slice(&s.token_ids);
        for p in 0..n - 1 {
            m[r * seq_len + p] = match mask {
                LossMask::All => true,
                LossMask::AnswerOnly => p + 1 >= s.answer_span.start,
            };
        }
    }
    Batch {
        tokens,
        batch,
        seq_len,
        mask: m,
    }
}

/// Epoch-shuffled batch indices. Each epoch is a fresh permutation drawn from
/// the batching substream, so step `k` is reproducible without replaying
/// earlier steps.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            batch_size,
            seed,
            cached: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng::step_stream(self.seed, rng::BATCHING, epoch));
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("cached").1
    }

    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.n as u64;
        let start = step * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|pos| {
                let perm = self.permutation(pos / n);
                perm[(pos % n) as usize]
            })
            .collect()
    }
}

/// Write one sample per line plus `<path>.json` describing the spec.
pub fn write_dataset(path: &Path, spec: &DatasetSpec, samples: &[Sample]) -> Result<()> {
    let mut body = String::with_capacity(samples.len() * 12);
    for s in samples {
        body.push_str(&s.text);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    let descriptor = serde_json::json!({
        "spec": spec,
        "lines": samples.len(),
        "format": "A+B=C",
    });
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&descriptor)? + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Sample::parse(l.trim()))
        .collect()
}

pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
