//! Reverse-mode sweep over a finished graph.

use std::collections::BTreeMap;

use super::graph::{gelu_deriv, softmax_value, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S> {
    grads: BTreeMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: usize) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<S>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: usize, g: Tensor<S>) {
        self.grads.insert(id, g);
    }

    pub fn global_norm(&self) -> S {
        self.grads.values().map(|g| g.sq_norm()).sum::<S>().sqrt()
    }

    pub fn scale_all(&mut self, c: S) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<S: Scalar> Graph<S> {
    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    /// Parameters that the loss does not depend on receive zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let adj = self.adjoints(loss)?;
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = adj[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.grads.get_mut(&id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoints of the leaf nodes with respect to the scalar `loss`. Interior
    /// adjoints are consumed during the sweep; leaves that do not influence
    /// the loss hold `None`.
    pub fn adjoints(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Param(_) | Op::Const => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Opaque { .. } | Op::Step(_) => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(self.value(*a), self.value(*b), &g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scaled(-S::one()));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = column_sums(&g, |gv, _| gv, None);
                    accumulate(&mut adj, *r, gr);
                    accumulate(&mut adj, *a, g);
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let rv = self.value(*r);
                    let gr = column_sums(&g, |gv, x| gv * x, Some(av));
                    let ga = super::graph::broadcast_row(&g, rv, |x, y| x * y);
                    accumulate(&mut adj, *r, gr);
                    accumulate(&mut adj, *a, ga);
                }
                Op::MulCol(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c);
                    let ga = super::graph::broadcast_col(&g, cv);
                    let gc = Tensor::from_parts(
                        cv.shape().to_vec(),
                        g.rows()
                            .zip(av.rows())
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                            .collect(),
                    );
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *c, gc);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, *a, g.scaled(c));
                }
                Op::AddScalar(a, _) => accumulate(&mut adj, *a, g),
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() });
                    accumulate(&mut adj, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_deriv(xv));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Pow(x, p) => {
                    let p = *p;
                    let gx = g.zip_map(self.value(*x), |gv, xv| gv * p * xv.powf(p - S::one()));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Softmax { x, .. } => {
                    let n = y.last_dim();
                    let mut gx = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.rows().zip(g.data().chunks_exact(n)) {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    accumulate(&mut adj, *x, Tensor::from_parts(y.shape().to_vec(), gx));
                }
                Op::SumLast(x) | Op::MeanLast(x) => {
                    let xv = self.value(*x);
                    let n = xv.last_dim();
                    let f = if matches!(node.op, Op::MeanLast(_)) {
                        S::of(1.0 / n as f64)
                    } else {
                        S::one()
                    };
                    let mut gx = Vec::with_capacity(xv.numel());
                    for &gv in g.data() {
                        gx.extend(std::iter::repeat_n(gv * f, n));
                    }
                    accumulate(&mut adj, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::CenterLast(x) => {
                    accumulate(&mut adj, *x, super::graph::center_value(&g));
                }
                Op::InvRms(x) => {
                    let xv = self.value(*x);
                    let n = xv.last_dim();
                    let inv_n = S::of(1.0 / n as f64);
                    let mut gx = Vec::with_capacity(xv.numel());
                    for ((xr, &r), &gv) in xv.rows().zip(y.data()).zip(g.data()) {
                        let c = -gv * r * r * r * inv_n;
                        gx.extend(xr.iter().map(|&xj| c * xj));
                    }
                    accumulate(&mut adj, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::SumAll(x) => {
                    let gx = Tensor::full(self.shape(*x), g.item());
                    accumulate(&mut adj, *x, gx);
                }
                Op::SqNorm(x) => {
                    let c = S::of(2.0) * g.item();
                    accumulate(&mut adj, *x, self.value(*x).scaled(c));
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut gt = vec![S::zero(); tv.numel()];
                    for (&id, gr) in ids.iter().zip(g.data().chunks_exact(d)) {
                        for (dst, &src) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut adj, *table, Tensor::from_parts(tv.shape().to_vec(), gt));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p)[0];
                        accumulate(&mut adj, p, g.slice_first(offset, offset + rows));
                        offset += rows;
                    }
                }
                Op::Slice { x, start, end } => {
                    let xv = self.value(*x);
                    let inner: usize = xv.shape()[1..].iter().product();
                    let mut gx = vec![S::zero(); xv.numel()];
                    gx[start * inner..end * inner].copy_from_slice(g.data());
                    accumulate(&mut adj, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::Reshape(x) => {
                    let gx = g.reshaped(self.shape(*x))?;
                    accumulate(&mut adj, *x, gx);
                }
                Op::Permute { x, axes } => {
                    let gx = tensor::permute(&g, &tensor::inverse_axes(axes));
                    accumulate(&mut adj, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = self.value(*logits);
                    let v = lv.last_dim();
                    let sm = softmax_value(lv, false);
                    let gs = g.item();
                    let mut gl = vec![S::zero(); lv.numel()];
                    for (r, (p, out)) in sm.rows().zip(gl.chunks_exact_mut(v)).enumerate() {
                        let w = weights[r];
                        if w == S::zero() {
                            continue;
                        }
                        for (o, &pv) in out.iter_mut().zip(p) {
                            *o = gs * w * pv;
                        }
                        out[targets[r]] -= gs * w;
                    }
                    accumulate(&mut adj, *logits, Tensor::from_parts(lv.shape().to_vec(), gl));
                }
            }
        }
        Ok(adj)
    }
}

/// Σ over rows of `f(g, a)` per column.
fn column_sums<S: Scalar>(g: &Tensor<S>, f: impl Fn(S, S) -> S, a: Option<&Tensor<S>>) -> Tensor<S> {
    let n = g.last_dim();
    let mut out = vec![S::zero(); n];
    match a {
        Some(a) => {
            for (gr, ar) in g.rows().zip(a.rows()) {
                for ((o, &gv), &av) in out.iter_mut().zip(gr).zip(ar) {
                    *o += f(gv, av);
                }
            }
        }
        None => {
            for gr in g.rows() {
                for (o, &gv) in out.iter_mut().zip(gr) {
                    *o += f(gv, S::zero());
                }
            }
        }
    }
    Tensor::from_parts(vec![n], out)
}

fn matmul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let sa = a.shape();
    let sb = b.shape();
    let k = sa[sa.len() - 1];
    if sb.len() == 2 {
        let n = sb[1];
        let m = a.numel() / k.max(1);
        let mut ga = vec![S::zero(); m * k];
        // ga = g · bᵀ
        S::gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
        let mut gb = vec![S::zero(); k * n];
        // gb = aᵀ · g
        S::gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
        (
            Tensor::from_parts(sa.to_vec(), ga),
            Tensor::from_parts(sb.to_vec(), gb),
        )
    } else {
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut ga = vec![S::zero(); batch * m * k];
        let mut gb = vec![S::zero(); batch * k * n];
        for i in 0..batch {
            let gi = &g.data()[i * m * n..(i + 1) * m * n];
            S::gemm(
                m,
                n,
                k,
                gi,
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                true,
                &mut ga[i * m * k..(i + 1) * m * k],
                false,
            );
            S::gemm(
                k,
                m,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                true,
                gi,
                false,
                &mut gb[i * k * n..(i + 1) * k * n],
                false,
            );
        }
        (
            Tensor::from_parts(sa.to_vec(), ga),
            Tensor::from_parts(sb.to_vec(), gb),
        )
    }
}
