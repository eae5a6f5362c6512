//! Named parameter storage and the fixed layout of the looped model.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, NormPlacement};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Parameter ids of one normalisation instance. `SimpleNorm` has neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: Option<usize>,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForwardIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// One transformer layer. `norm_in` is used by Pre, PreSandwich and
/// PostSandwich; `norm_out` by Post, PreSandwich and PostSandwich.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub attn: AttentionIds,
    pub ff: FeedForwardIds,
    pub attn_norm_in: Option<NormIds>,
    pub attn_norm_out: Option<NormIds>,
    pub ff_norm_in: Option<NormIds>,
    pub ff_norm_out: Option<NormIds>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub prelude: Vec<LayerIds>,
    pub recurrent: Vec<LayerIds>,
    pub coda: Vec<LayerIds>,
    pub head_norm: NormIds,
    /// `None` when the head is tied to the token embedding.
    pub head_w: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    ResidualOut,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn norm(&mut self, cfg: &ModelConfig, prefix: &str) -> NormIds {
        let d = cfg.d_model;
        let gain = cfg
            .norm_operator
            .has_gain()
            .then(|| self.add(format!("{prefix}.gain"), vec![d], InitKind::Ones));
        let bias = cfg
            .norm_operator
            .has_bias()
            .then(|| self.add(format!("{prefix}.bias"), vec![d], InitKind::Zeros));
        NormIds { gain, bias }
    }

    fn layer(&mut self, cfg: &ModelConfig, prefix: &str) -> LayerIds {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let lin = |b: &mut Self, name: &str, din: usize, dout: usize, init: InitKind| {
            let w = b.add(format!("{prefix}.{name}.weight"), vec![din, dout], init);
            let bias = b.add(format!("{prefix}.{name}.bias"), vec![dout], InitKind::Zeros);
            (w, bias)
        };
        let (wq, bq) = lin(self, "attn.q", d, d, InitKind::Normal);
        let (wk, bk) = lin(self, "attn.k", d, d, InitKind::Normal);
        let (wv, bv) = lin(self, "attn.v", d, d, InitKind::Normal);
        let (wo, bo) = lin(self, "attn.out", d, d, InitKind::ResidualOut);
        let (w1, b1) = lin(self, "ff.up", d, f, InitKind::Normal);
        let (w2, b2) = lin(self, "ff.down", f, d, InitKind::ResidualOut);
        let placement = cfg.norm_placement;
        let uses_in = !matches!(placement, NormPlacement::Post);
        let uses_out = !matches!(placement, NormPlacement::Pre);
        let attn_norm_in = uses_in.then(|| self.norm(cfg, &format!("{prefix}.attn.norm_in")));
        let attn_norm_out = uses_out.then(|| self.norm(cfg, &format!("{prefix}.attn.norm_out")));
        let ff_norm_in = uses_in.then(|| self.norm(cfg, &format!("{prefix}.ff.norm_in")));
        let ff_norm_out = uses_out.then(|| self.norm(cfg, &format!("{prefix}.ff.norm_out")));
        LayerIds {
            attn: AttentionIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            },
            ff: FeedForwardIds { w1, b1, w2, b2 },
            attn_norm_in,
            attn_norm_out,
            ff_norm_in,
            ff_norm_out,
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let tok_emb = b.add("embed.tokens".into(), vec![cfg.vocab_size, cfg.d_model], InitKind::Normal);
    let pos_emb = b.add("embed.positions".into(), vec![cfg.max_seq_len, cfg.d_model], InitKind::Normal);
    let prelude = (0..cfg.n_prelude_blocks)
        .map(|i| b.layer(cfg, &format!("prelude.{i}")))
        .collect();
    let recurrent = (0..cfg.n_block_layers)
        .map(|i| b.layer(cfg, &format!("recurrent.{i}")))
        .collect();
    let coda = (0..cfg.n_coda_blocks)
        .map(|i| b.layer(cfg, &format!("coda.{i}")))
        .collect();
    let head_norm = b.norm(cfg, "head.norm");
    let head_w = (!cfg.tie_embeddings)
        .then(|| b.add("head.weight".into(), vec![cfg.d_model, cfg.vocab_size], InitKind::Normal));
    (
        Layout {
            tok_emb,
            pos_emb,
            prelude,
            recurrent,
            coda,
            head_norm,
            head_w,
        },
        b.specs,
    )
}

/// All trainable tensors of a looped model plus the config they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Parameters<S> {
    /// Fresh parameters: N(0, 0.02) weights, residual output projections
    /// further scaled by `1/sqrt(2·n_block_layers)`, unit gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = rng::substream(seed, rng::INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = 1.0 / (2.0 * config.n_block_layers as f64).sqrt();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                InitKind::Normal => (0..n).map(|_| S::of(normal.sample(&mut rng))).collect(),
                InitKind::ResidualOut => (0..n).map(|_| S::of(normal.sample(&mut rng) * resid)).collect(),
                InitKind::Zeros => vec![S::zero(); n],
                InitKind::Ones => vec![S::one(); n],
            };
            names.push(spec.name);
            tensors.push(Tensor::from_parts(spec.shape, data));
        }
        Ok(Self::assemble(config.clone(), layout, names, tensors))
    }

    fn assemble(config: ModelConfig, layout: Layout, names: Vec<String>, tensors: Vec<Tensor<S>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Parameters {
            config,
            layout,
            names,
            tensors,
            index,
        }
    }

    /// Rebuild from named tensors (e.g. a checkpoint), validating every shape.
    pub fn from_named(config: &ModelConfig, mut named: HashMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = named
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {} is not finite", spec.name)));
            }
            names.push(spec.name);
            tensors.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self::assemble(config.clone(), layout, names, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Register every tensor as a trainable leaf of `g`. The returned handles
    /// are indexed by parameter id.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters::assemble(
            self.config.clone(),
            self.layout.clone(),
            self.names.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
        )
    }
}
