//! Define-by-run computation graph.
//!
//! Every primitive appends one node holding its op, parent handles and output
//! value. Parents always have smaller indices, so the node vector is already a
//! topological order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Param(usize),
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Relu(Var),
    Step(Var),
    Gelu(Var),
    Tanh(Var),
    Pow(Var, S),
    Softmax { x: Var, causal: bool },
    SumLast(Var),
    MeanLast(Var),
    CenterLast(Var),
    InvRms(Var),
    SumAll(Var),
    SqNorm(Var),
    Gather { table: Var, ids: Arc<[usize]> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        weights: Arc<[S]>,
    },
    Opaque { x: Var, name: &'static str },
}

impl<S> Op<S> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Param(_) | Op::Const => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Relu(x)
            | Op::Step(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Pow(x, _)
            | Op::Softmax { x, .. }
            | Op::SumLast(x)
            | Op::MeanLast(x)
            | Op::CenterLast(x)
            | Op::InvRms(x)
            | Op::SumAll(x)
            | Op::SqNorm(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Opaque { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Pow(..) => "pow",
            Op::Softmax { causal: false, .. } => "softmax",
            Op::Softmax { causal: true, .. } => "causal_softmax",
            Op::SumLast(_) => "sum_last",
            Op::MeanLast(_) => "mean_last",
            Op::CenterLast(_) => "center_last",
            Op::InvRms(_) => "inv_rms",
            Op::SumAll(_) => "sum_all",
            Op::SqNorm(_) => "sq_norm",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Opaque { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<S> {
    pub(crate) op: Op<S>,
    pub(crate) value: Tensor<S>,
}

/// Append-only computation graph. One graph is built per training step.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn col_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(last) => *last = 1,
        None => s.push(1),
    }
    s
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * a * x * x)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Drop every node created at or after index `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Inputs of node `v`; always earlier nodes.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(node))
    }

    /// Trainable leaf identified by `id` in the caller's parameter store.
    pub fn param(&mut self, id: usize, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn is_param(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let z = Tensor::zeros(self.shape(v));
        self.constant(z)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. `a: [..., m, k] · b: [k, n]` flattens the leading axes
    /// of `a`; `a: [B, m, k] · b: [B, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = matmul_value(self.value(a), self.value(b))
            .ok_or_else(|| mismatch("matmul", &sa, &sb))?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sa.last() != Some(&sr[0]) {
            return Err(mismatch(op, sa, sr));
        }
        Ok(())
    }

    /// `a[..., j] + row[j]` (bias broadcast over rows).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let value = broadcast_row(self.value(a), self.value(row), |x, r| x + r);
        self.push(Op::AddRow(a, row), value)
    }

    /// `a[..., j] * row[j]` (gain broadcast over rows).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let value = broadcast_row(self.value(a), self.value(row), |x, r| x * r);
        self.push(Op::MulRow(a, row), value)
    }

    /// `a[..., j] * col[..., 0]` (one scale per row).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != col_shape(sa).as_slice() {
            return Err(mismatch("mul_col", sa, sc));
        }
        let value = broadcast_col(self.value(a), self.value(col));
        self.push(Op::MulCol(a, col), value)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).scaled(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), value)
    }

    // ---- elementwise nonlinearities --------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(S::zero()));
        self.push(Op::Relu(x), value)
    }

    /// Heaviside step `1[x > 0]`; its derivative is zero almost everywhere.
    pub fn step(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > S::zero() { S::one() } else { S::zero() });
        self.push(Op::Step(x), value)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push(Op::Gelu(x), value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), value)
    }

    pub fn pow(&mut self, x: Var, p: S) -> Result<Var> {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(Op::Pow(x, p), value)
    }

    // ---- row-wise ops (last axis) -----------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_value(self.value(x), false);
        self.push(Op::Softmax { x, causal: false }, value)
    }

    /// Softmax over the last axis with keys after the query position masked.
    /// The query position is the index along the second-to-last axis.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(mismatch("softmax", self.shape(x), &[0, 0]));
        }
        let value = softmax_value(self.value(x), true);
        self.push(Op::Softmax { x, causal: true }, value)
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::from_parts(col_shape(xv.shape()), xv.rows().map(|r| r.iter().copied().sum()).collect());
        self.push(Op::SumLast(x), value)
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = S::of(xv.last_dim() as f64);
        let value = Tensor::from_parts(
            col_shape(xv.shape()),
            xv.rows().map(|r| r.iter().copied().sum::<S>() / n).collect(),
        );
        self.push(Op::MeanLast(x), value)
    }

    /// `x - mean(x)` along the last axis.
    pub fn center_last(&mut self, x: Var) -> Result<Var> {
        let value = center_value(self.value(x));
        self.push(Op::CenterLast(x), value)
    }

    /// `(mean(x²) + eps)^(-1/2)` along the last axis, shape `[..., 1]`.
    pub fn inv_rms(&mut self, x: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let n = S::of(xv.last_dim() as f64);
        let value = Tensor::from_parts(
            col_shape(xv.shape()),
            xv.rows()
                .map(|r| (r.iter().map(|&v| v * v).sum::<S>() / n + eps).sqrt().recip())
                .collect(),
        );
        self.push(Op::InvRms(x), value)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, S::of(1.0 / n as f64))
    }

    /// Squared Euclidean norm of all entries.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sq_norm());
        self.push(Op::SqNorm(x), value)
    }

    // ---- indexing and layout --------------------------------------------

    /// Rows of `table: [V, d]` selected by `ids`, output shape `prefix ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || tensor::numel(prefix) != ids.len() {
            return Err(mismatch("gather", tv.shape(), prefix));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, vocab: rows });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, out);
        self.push(
            Op::Gather {
                table,
                ids: ids.into(),
            },
            value,
        )
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let inner = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != inner[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&inner);
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(shape, data))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start > end || end > s[0] {
            return Err(mismatch("slice", s, &[start, end]));
        }
        let value = self.value(x).slice_first(start, end);
        self.push(Op::Slice { x, start, end }, value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(Op::Reshape(x), value)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", self.shape(x), axes));
        }
        let value = tensor::permute(self.value(x), axes);
        self.push(
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            value,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(mismatch("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    // ---- losses --------------------------------------------------------

    /// `Σ_r weights[r] · (-log softmax(logits[r])[targets[r]])` over rows of
    /// `logits: [..., V]`. Rows with zero weight are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len(), weights.len()]));
        }
        let mut total = S::zero();
        for (r, row) in lv.rows().enumerate() {
            if weights[r] == S::zero() {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab: v });
            }
            total += weights[r] * (log_sum_exp(row) - row[t]);
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                weights: weights.into(),
            },
            Tensor::scalar(total),
        )
    }

    /// Elementwise evaluation-only transform. Gradients do not flow through
    /// it and it has no tangent rule.
    pub fn opaque(&mut self, x: Var, name: &'static str, f: impl Fn(S) -> S) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(Op::Opaque { x, name }, value)
    }

    // ---- composite layers --------------------------------------------------

    /// `x · w (+ b)` for `x: [..., din]`, `w: [din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Normalisation by RMS with no affine parameters: `x / sqrt(mean(x²) + eps)`.
    pub fn simple_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let r = self.inv_rms(x, eps)?;
        self.mul_col(x, r)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let n = self.simple_norm(x, eps)?;
        self.mul_row(n, gain)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let c = self.center_last(x)?;
        let n = self.simple_norm(c, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// GELU derivative built from primitives (so that it is itself differentiable).
    pub(crate) fn gelu_deriv_graph(&mut self, x: Var) -> Result<Var> {
        let c = S::of(GELU_C);
        let a = S::of(GELU_A);
        let x2 = self.mul(x, x)?;
        let x3 = self.mul(x2, x)?;
        let ax3 = self.scale(x3, a)?;
        let inner = self.add(x, ax3)?;
        let u = self.scale(inner, c)?;
        let th = self.tanh(u)?;
        let one_plus_th = self.add_scalar(th, S::one())?;
        let first = self.scale(one_plus_th, S::of(0.5))?;
        let th2 = self.mul(th, th)?;
        let neg_th2 = self.scale(th2, -S::one())?;
        let sech2 = self.add_scalar(neg_th2, S::one())?;
        let x2a = self.scale(x2, S::of(3.0) * a)?;
        let du = self.add_scalar(x2a, S::one())?;
        let p = self.mul(x, sech2)?;
        let p = self.mul(p, du)?;
        let second = self.scale(p, S::of(0.5) * c)?;
        self.add(first, second)
    }

    pub(crate) fn zeros_for(&mut self, v: Var) -> Var {
        self.zeros_like(v)
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let s: S = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_value<S: Scalar>(x: &Tensor<S>, causal: bool) -> Tensor<S> {
    let n = x.last_dim();
    let q_len = if causal { x.shape()[x.rank() - 2] } else { 1 };
    let mut out = vec![S::zero(); x.numel()];
    for (r, (row, o)) in x.rows().zip(out.chunks_exact_mut(n)).enumerate() {
        let visible = if causal { (r % q_len + 1).min(n) } else { n };
        let m = row[..visible].iter().copied().fold(S::neg_infinity(), S::max);
        let mut s = S::zero();
        for (oj, &xj) in o[..visible].iter_mut().zip(row) {
            *oj = (xj - m).exp();
            s += *oj;
        }
        for oj in &mut o[..visible] {
            *oj /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn center_value<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = S::of(x.last_dim() as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let mean = row.iter().copied().sum::<S>() / n;
        out.extend(row.iter().map(|&v| v - mean));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn broadcast_row<S: Scalar>(a: &Tensor<S>, row: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let r = row.data();
    let mut out = Vec::with_capacity(a.numel());
    for chunk in a.rows() {
        out.extend(chunk.iter().zip(r).map(|(&x, &y)| f(x, y)));
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

pub(crate) fn broadcast_col<S: Scalar>(a: &Tensor<S>, col: &Tensor<S>) -> Tensor<S> {
    let mut out = Vec::with_capacity(a.numel());
    for (chunk, &c) in a.rows().zip(col.data()) {
        out.extend(chunk.iter().map(|&x| x * c));
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Shared shape logic for the matmul forward pass. Returns `None` on mismatch.
pub(crate) fn matmul_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Option<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 {
        return None;
    }
    let k = sa[sa.len() - 1];
    if sb.len() == 2 {
        if sb[0] != k {
            return None;
        }
        let n = sb[1];
        let m = a.numel() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Some(Tensor::from_parts(shape, out))
    } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sb[1] == k {
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Some(Tensor::from_parts(vec![batch, m, n], out))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_softmax_masks_future_keys() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 3], &[1.0; 9]));
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!((v[8] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn simple_norm_output_has_norm_sqrt_d() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[3.0, -1.0, 2.0, 7.0, 100.0, 0.5, -30.0, 1.0]));
        let y = g.simple_norm(x, 0.0).unwrap();
        for row in g.value(y).rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 16]));
        let l = g.cross_entropy(x, &[3], &[1.0]).unwrap();
        assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
        assert!((16f64.ln() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_reported_with_node() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1e300]));
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul", node: 1 }));
        let z = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.pow(z, -1.0), Err(Error::NonFinite { op: "pow", .. })));
    }

    #[test]
    fn gather_rejects_unknown_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.gather(table, &[1, 9], &[2]),
            Err(Error::Vocabulary { id: 9, vocab: 4 })
        ));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        let s = g.slice(c, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }
}
