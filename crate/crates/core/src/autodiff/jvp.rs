//! Jacobian-vector products by tangent propagation.
//!
//! A function is first traced into the graph; its tangent is then emitted as
//! additional primitive nodes, one rule per traced node. Because tangents are
//! ordinary graph nodes, reverse mode applies to any function of them.

use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Record of a function applied to one input inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    pub input: Var,
    pub output: Var,
    start: usize,
    end: usize,
}

/// A primal value paired with its tangent, both living in the same graph.
#[derive(Debug, Clone, Copy)]
pub struct DualTensor {
    pub primal: Var,
    pub tangent: Var,
}

impl<S: Scalar> Graph<S> {
    /// Apply `f` to `input`, remembering which nodes it created.
    pub fn trace<F>(&mut self, input: Var, f: F) -> Result<Trace>
    where
        F: FnOnce(&mut Self, Var) -> Result<Var>,
    {
        let start = self.len();
        let output = f(self, input)?;
        Ok(Trace {
            input,
            output,
            start,
            end: self.len(),
        })
    }

    /// Emit the tangent of a traced function for input direction `tangent`.
    pub fn push_tangent(&mut self, trace: &Trace, tangent: Var) -> Result<Var> {
        if self.shape(tangent) != self.shape(trace.input) {
            return Err(Error::ShapeMismatch {
                op: "jvp",
                lhs: self.shape(trace.input).to_vec(),
                rhs: self.shape(tangent).to_vec(),
            });
        }
        let mut tan: Vec<Option<Var>> = vec![None; trace.end];
        tan[trace.input.0] = Some(tangent);
        for i in trace.start..trace.end {
            if i == trace.input.0 {
                continue;
            }
            tan[i] = self.tangent_rule(i, &tan)?;
        }
        match tan.get(trace.output.0).copied().flatten() {
            Some(t) => Ok(t),
            None => Ok(self.zeros_for(trace.output)),
        }
    }

    /// Tangent of `node` given tangents of its parents (`None` means zero).
    fn tangent_rule(&mut self, node: usize, tan: &[Option<Var>]) -> Result<Option<Var>> {
        let op = self.nodes[node].op.clone();
        let out = Var(node);
        let t = |v: &Var| tan.get(v.0).copied().flatten();
        let r = match op {
            Op::Param(_) | Op::Const | Op::Step(_) => None,
            Op::Opaque { name, x } => {
                if t(&x).is_some() {
                    return Err(Error::UnsupportedTangent { op: name });
                }
                None
            }
            Op::MatMul(a, b) => {
                let l = match t(&a) {
                    Some(ta) => Some(self.matmul(ta, b)?),
                    None => None,
                };
                let r = match t(&b) {
                    Some(tb) => Some(self.matmul(a, tb)?),
                    None => None,
                };
                self.add_opt(l, r)?
            }
            Op::Add(a, b) => self.add_opt(t(&a), t(&b))?,
            Op::Sub(a, b) => {
                let nb = match t(&b) {
                    Some(tb) => Some(self.scale(tb, -S::one())?),
                    None => None,
                };
                self.add_opt(t(&a), nb)?
            }
            Op::Mul(a, b) => {
                let l = match t(&a) {
                    Some(ta) => Some(self.mul(ta, b)?),
                    None => None,
                };
                let r = match t(&b) {
                    Some(tb) => Some(self.mul(a, tb)?),
                    None => None,
                };
                self.add_opt(l, r)?
            }
            Op::AddRow(a, row) => match (t(&a), t(&row)) {
                (ta, None) => ta,
                (ta, Some(tr)) => {
                    let base = match ta {
                        Some(ta) => ta,
                        None => self.zeros_for(a),
                    };
                    Some(self.add_row(base, tr)?)
                }
            },
            Op::MulRow(a, row) => {
                let l = match t(&a) {
                    Some(ta) => Some(self.mul_row(ta, row)?),
                    None => None,
                };
                let r = match t(&row) {
                    Some(tr) => Some(self.mul_row(a, tr)?),
                    None => None,
                };
                self.add_opt(l, r)?
            }
            Op::MulCol(a, col) => {
                let l = match t(&a) {
                    Some(ta) => Some(self.mul_col(ta, col)?),
                    None => None,
                };
                let r = match t(&col) {
                    Some(tc) => Some(self.mul_col(a, tc)?),
                    None => None,
                };
                self.add_opt(l, r)?
            }
            Op::Scale(a, c) => match t(&a) {
                Some(ta) => Some(self.scale(ta, c)?),
                None => None,
            },
            Op::AddScalar(a, _) => t(&a),
            Op::Relu(x) => match t(&x) {
                Some(tx) => {
                    let mask = self.step(x)?;
                    Some(self.mul(tx, mask)?)
                }
                None => None,
            },
            Op::Gelu(x) => match t(&x) {
                Some(tx) => {
                    let d = self.gelu_deriv_graph(x)?;
                    Some(self.mul(tx, d)?)
                }
                None => None,
            },
            Op::Tanh(x) => match t(&x) {
                Some(tx) => {
                    let y2 = self.mul(out, out)?;
                    let neg = self.scale(y2, -S::one())?;
                    let d = self.add_scalar(neg, S::one())?;
                    Some(self.mul(tx, d)?)
                }
                None => None,
            },
            Op::Pow(x, p) => match t(&x) {
                Some(tx) => {
                    let xp = self.pow(x, p - S::one())?;
                    let d = self.scale(xp, p)?;
                    Some(self.mul(tx, d)?)
                }
                None => None,
            },
            Op::Softmax { x, .. } => match t(&x) {
                Some(tx) => {
                    // y ⊙ (t - Σ y⊙t)
                    let p = self.mul(out, tx)?;
                    let s = self.sum_last(p)?;
                    let ys = self.mul_col(out, s)?;
                    Some(self.sub(p, ys)?)
                }
                None => None,
            },
            Op::SumLast(x) => match t(&x) {
                Some(tx) => Some(self.sum_last(tx)?),
                None => None,
            },
            Op::MeanLast(x) => match t(&x) {
                Some(tx) => Some(self.mean_last(tx)?),
                None => None,
            },
            Op::CenterLast(x) => match t(&x) {
                Some(tx) => Some(self.center_last(tx)?),
                None => None,
            },
            Op::InvRms(x) => match t(&x) {
                Some(tx) => {
                    // -r³ · mean(x ⊙ t)
                    let r2 = self.mul(out, out)?;
                    let r3 = self.mul(r2, out)?;
                    let xt = self.mul(x, tx)?;
                    let m = self.mean_last(xt)?;
                    let p = self.mul(r3, m)?;
                    Some(self.scale(p, -S::one())?)
                }
                None => None,
            },
            Op::SumAll(x) => match t(&x) {
                Some(tx) => Some(self.sum_all(tx)?),
                None => None,
            },
            Op::SqNorm(x) => match t(&x) {
                Some(tx) => {
                    let xt = self.mul(x, tx)?;
                    let s = self.sum_all(xt)?;
                    Some(self.scale(s, S::of(2.0))?)
                }
                None => None,
            },
            Op::Gather { table, ids } => match t(&table) {
                Some(tt) => {
                    let prefix = self.shape(out)[..self.shape(out).len() - 1].to_vec();
                    Some(self.gather(tt, &ids, &prefix)?)
                }
                None => None,
            },
            Op::Concat(parts) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    None
                } else {
                    let mut tp = Vec::with_capacity(parts.len());
                    for p in &parts {
                        tp.push(match t(p) {
                            Some(tv) => tv,
                            None => self.zeros_for(*p),
                        });
                    }
                    Some(self.concat(&tp)?)
                }
            }
            Op::Slice { x, start, end } => match t(&x) {
                Some(tx) => Some(self.slice(tx, start, end)?),
                None => None,
            },
            Op::Reshape(x) => match t(&x) {
                Some(tx) => {
                    let shape = self.shape(out).to_vec();
                    Some(self.reshape(tx, &shape)?)
                }
                None => None,
            },
            Op::Permute { x, axes } => match t(&x) {
                Some(tx) => Some(self.permute(tx, &axes)?),
                None => None,
            },
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => match t(&logits) {
                Some(tl) => {
                    // Σ_r w_r (softmax(l_r) - onehot_r) · t_r
                    let shape = self.shape(logits).to_vec();
                    let v = *shape.last().unwrap_or(&1);
                    let mut onehot = vec![S::zero(); self.value(logits).numel()];
                    for (r, &tg) in targets.iter().enumerate() {
                        onehot[r * v + tg] = S::one();
                    }
                    let onehot = self.constant(Tensor::new(shape.clone(), onehot)?);
                    let sm = self.softmax(logits)?;
                    let diff = self.sub(sm, onehot)?;
                    let p = self.mul(diff, tl)?;
                    let rows = self.sum_last(p)?;
                    let wshape = self.shape(rows).to_vec();
                    let w = self.constant(Tensor::new(wshape, weights.to_vec())?);
                    let weighted = self.mul(rows, w)?;
                    Some(self.sum_all(weighted)?)
                }
                None => None,
            },
        };
        Ok(r)
    }

    fn add_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)?),
            (Some(a), None) => Some(a),
            (None, b) => b,
        })
    }
}

/// Tangent-augmented forward pass: returns `f(state)` and `J·tangent` where
/// `J = ∂f/∂state` at `state`. Both results are graph nodes.
pub fn jvp_forward<S, F>(g: &mut Graph<S>, f: F, state: Var, tangent: Var) -> Result<DualTensor>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
{
    if g.shape(state) != g.shape(tangent) {
        return Err(Error::ShapeMismatch {
            op: "jvp",
            lhs: g.shape(state).to_vec(),
            rhs: g.shape(tangent).to_vec(),
        });
    }
    let trace = g.trace(state, f)?;
    let t = g.push_tangent(&trace, tangent)?;
    Ok(DualTensor {
        primal: trace.output,
        tangent: t,
    })
}

/// Evaluate a JVP on plain tensors using a scratch graph.
pub fn jvp_eval<S, F>(f: F, state: &Tensor<S>, tangent: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(state.clone());
    let v = g.constant(tangent.clone());
    let d = jvp_forward(&mut g, f, x, v)?;
    Ok((g.value(d.primal).clone(), g.value(d.tangent).clone()))
}

/// Central-difference estimate `(f(x + εv) - f(x - εv)) / 2ε`.
pub fn finite_diff_jvp<S, F>(mut f: F, state: &Tensor<S>, tangent: &Tensor<S>, step: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<Tensor<S>>,
{
    if step <= S::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    if state.shape() != tangent.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_jvp",
            lhs: state.shape().to_vec(),
            rhs: tangent.shape().to_vec(),
        });
    }
    let plus = state.add(&tangent.scaled(step));
    let minus = state.sub(&tangent.scaled(step));
    let fp = f(&plus)?;
    let fm = f(&minus)?;
    let inv = S::one() / (S::of(2.0) * step);
    Ok(fp.sub(&fm).scaled(inv))
}
