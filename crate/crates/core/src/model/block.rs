//! Graph-level construction of the looped model.

use super::config::{NormOperator, NormPlacement};
use super::params::{LayerIds, NormIds, Parameters};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters registered as leaves of one graph.
pub struct Bound<'p, S> {
    params: &'p Parameters<S>,
    vars: Vec<Var>,
}

impl<'p, S: Scalar> Bound<'p, S> {
    pub fn new(params: &'p Parameters<S>, g: &mut Graph<S>) -> Self {
        let vars = params.bind(g);
        Bound { params, vars }
    }

    /// Bind with an explicit leaf per parameter (e.g. constants, or leaves
    /// created by the caller).
    pub fn with_vars(params: &'p Parameters<S>, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len());
        Bound { params, vars }
    }

    pub fn params(&self) -> &'p Parameters<S> {
        self.params
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    fn eps(&self) -> S {
        S::of(self.params.config().norm_eps)
    }

    fn norm(&self, g: &mut Graph<S>, x: Var, ids: NormIds) -> Result<Var> {
        let eps = self.eps();
        match self.params.config().norm_operator {
            NormOperator::LayerNorm => g.layer_norm(
                x,
                self.var(ids.gain.expect("layer norm gain")),
                self.var(ids.bias.expect("layer norm bias")),
                eps,
            ),
            NormOperator::RmsNorm => g.rms_norm(x, self.var(ids.gain.expect("rms norm gain")), eps),
            NormOperator::SimpleNorm => g.simple_norm(x, eps),
        }
    }

    /// Causal multi-head self-attention on `x: [B, M, d]`.
    fn attention(&self, g: &mut Graph<S>, x: Var, layer: &LayerIds) -> Result<Var> {
        let cfg = self.params.config();
        let (b, m) = batch_dims(g, x)?;
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let a = &layer.attn;
        let heads = |g: &mut Graph<S>, w: usize, bias: usize| -> Result<Var> {
            let y = g.linear(x, self.var(w), Some(self.var(bias)))?;
            let y = g.reshape(y, &[b, m, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, m, dh])
        };
        let q = heads(g, a.wq, a.bq)?;
        let k = heads(g, a.wk, a.bk)?;
        let v = heads(g, a.wv, a.bv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
        let att = g.causal_softmax(scores)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[b, h, m, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, m, cfg.d_model])?;
        g.linear(ctx, self.var(a.wo), Some(self.var(a.bo)))
    }

    fn feed_forward(&self, g: &mut Graph<S>, x: Var, layer: &LayerIds) -> Result<Var> {
        let f = &layer.ff;
        let u = g.linear(x, self.var(f.w1), Some(self.var(f.b1)))?;
        let a = g.gelu(u)?;
        g.linear(a, self.var(f.w2), Some(self.var(f.b2)))
    }

    /// Wrap sublayer `f` according to the configured placement.
    fn residual<F>(&self, g: &mut Graph<S>, x: Var, norm_in: Option<NormIds>, norm_out: Option<NormIds>, f: F) -> Result<Var>
    where
        F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
    {
        match self.params.config().norm_placement {
            NormPlacement::Pre => {
                let n = self.norm(g, x, norm_in.expect("pre norm"))?;
                let y = f(g, n)?;
                g.add(x, y)
            }
            NormPlacement::Post => {
                let y = f(g, x)?;
                let s = g.add(x, y)?;
                self.norm(g, s, norm_out.expect("post norm"))
            }
            NormPlacement::PreSandwich => {
                let n = self.norm(g, x, norm_in.expect("sandwich in"))?;
                let y = f(g, n)?;
                let y = self.norm(g, y, norm_out.expect("sandwich out"))?;
                g.add(x, y)
            }
            NormPlacement::PostSandwich => {
                let n = self.norm(g, x, norm_in.expect("sandwich in"))?;
                let y = f(g, n)?;
                let s = g.add(x, y)?;
                self.norm(g, s, norm_out.expect("sandwich out"))
            }
        }
    }

    /// One transformer layer: attention sublayer then feed-forward sublayer.
    pub fn layer(&self, g: &mut Graph<S>, x: Var, layer: &LayerIds) -> Result<Var> {
        let x = self.residual(g, x, layer.attn_norm_in, layer.attn_norm_out, |g, n| {
            self.attention(g, n, layer)
        })?;
        self.residual(g, x, layer.ff_norm_in, layer.ff_norm_out, |g, n| {
            self.feed_forward(g, n, layer)
        })
    }

    /// The shared recurrent map on `h: [B, M, d]`.
    pub fn recurrent_block(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        let mut x = h;
        for layer in &self.params.layout().recurrent {
            x = self.layer(g, x, layer)?;
        }
        Ok(x)
    }

    /// Token plus positional embeddings followed by the prelude layers.
    /// `tokens` is row-major `[batch, seq_len]`.
    pub fn prelude(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize, seq_len: usize) -> Result<Var> {
        let cfg = self.params.config();
        check_tokens(tokens, batch, seq_len, cfg.vocab_size, cfg.max_seq_len)?;
        let layout = self.params.layout();
        let tok = g.gather(self.var(layout.tok_emb), tokens, &[batch, seq_len])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let pos = g.gather(self.var(layout.pos_emb), &positions, &[batch, seq_len])?;
        let mut h = g.add(tok, pos)?;
        for layer in &layout.prelude {
            h = self.layer(g, h, layer)?;
        }
        Ok(h)
    }

    /// Coda layers then the output head; logits at every position.
    pub fn coda_head(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        let layout = self.params.layout();
        let mut x = h;
        for layer in &layout.coda {
            x = self.layer(g, x, layer)?;
        }
        let n = self.norm(g, x, layout.head_norm)?;
        match layout.head_w {
            Some(w) => g.matmul(n, self.var(w)),
            None => {
                let wt = g.transpose(self.var(layout.tok_emb))?;
                g.matmul(n, wt)
            }
        }
    }

    /// Full forward pass to depth `t`. Returns logits `[B, M, V]` and, when
    /// `record` is set, the latent states `h^(0)..h^(t)` as graph nodes.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        tokens: &[usize],
        batch: usize,
        seq_len: usize,
        t: usize,
        record: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = self.prelude(g, tokens, batch, seq_len)?;
        let mut states = Vec::new();
        if record {
            states.reserve(t + 1);
            states.push(h);
        }
        for _ in 0..t {
            h = self.recurrent_block(g, h)?;
            if record {
                states.push(h);
            }
        }
        if !record {
            states.push(h);
        }
        let logits = self.coda_head(g, h)?;
        Ok((logits, states))
    }
}

pub(crate) fn batch_dims<S: Scalar>(g: &Graph<S>, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        [b, m, _] => Ok((*b, *m)),
        other => Err(Error::ShapeMismatch {
            op: "recurrent_block",
            lhs: other.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

pub(crate) fn check_tokens(tokens: &[usize], batch: usize, seq_len: usize, vocab: usize, max_len: usize) -> Result<()> {
    if seq_len > max_len {
        return Err(Error::contract(format!(
            "sequence length {seq_len} exceeds max_seq_len {max_len}"
        )));
    }
    if tokens.len() != batch * seq_len {
        return Err(Error::contract(format!(
            "expected {} tokens for batch {batch} × length {seq_len}, got {}",
            batch * seq_len,
            tokens.len()
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= vocab) {
        return Err(Error::Vocabulary { id, vocab });
    }
    Ok(())
}
