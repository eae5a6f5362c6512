#![allow(dead_code)]

use looplab::autodiff::{Graph, Var};
use looplab::model::{ModelConfig, NormOperator, NormPlacement, Parameters};
use looplab::rng::{self, Rng};
use looplab::{Result, Tensor64};
use rand_distr::{Distribution, StandardNormal};

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

pub fn rng(seed: u64) -> Rng {
    rng::substream(seed, "tests")
}

pub fn normal(shape: &[usize], rng: &mut Rng) -> Tensor64 {
    let n = shape.iter().product::<usize>();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

/// Entries bounded away from zero, for ops with a kink there.
pub fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor64 {
    normal(shape, rng).map(|x| if x >= 0.0 { x + 0.2 } else { x - 0.2 })
}

pub fn positive(shape: &[usize], rng: &mut Rng) -> Tensor64 {
    normal(shape, rng).map(|x| x * x + 0.5)
}

/// `|a - b| / max(1, |a|, |b|)`, maximised over entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn leaves(g: &mut Graph<f64>, inputs: &[Tensor64]) -> Vec<Var> {
    inputs.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect()
}

/// Value of `f` at `inputs`.
pub fn eval(f: &Build, inputs: &[Tensor64]) -> Tensor64 {
    let mut g = Graph::new();
    let vars = leaves(&mut g, inputs);
    let y = f(&mut g, &vars).unwrap();
    g.value(y).clone()
}

/// Reverse-mode gradient of `Σ w ⊙ f(inputs)` against central differences.
/// Returns the worst relative error over all input entries.
pub fn gradcheck(f: &Build, inputs: &[Tensor64], step: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let w = normal(eval(f, inputs).shape(), &mut r);
    let loss = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let y = f(g, vars)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        g.sum_all(p)
    };
    let mut g = Graph::new();
    let vars = leaves(&mut g, inputs);
    let l = loss(&mut g, &vars).unwrap();
    let grads = g.backward(l).unwrap();
    let scalar_at = |xs: &[Tensor64]| {
        let mut g = Graph::new();
        let vars = leaves(&mut g, xs);
        let l = loss(&mut g, &vars).unwrap();
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let analytic = grads
            .get(i)
            .cloned()
            .unwrap_or_else(|| Tensor64::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut xs = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + step;
            let fp = scalar_at(&xs);
            xs[i].data_mut()[j] = x0 - step;
            let fm = scalar_at(&xs);
            xs[i].data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * step);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Forward-mode tangent of `f` along a random direction in each input in
/// turn, against central differences. Returns the worst relative error.
pub fn jvpcheck(f: &Build, inputs: &[Tensor64], step: f64, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x9e37);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let v = normal(inputs[i].shape(), &mut r);
        let mut g = Graph::new();
        let vars = leaves(&mut g, inputs);
        let tv = g.constant(v.clone());
        let trace = g
            .trace(vars[i], |g, x| {
                let mut vs = vars.clone();
                vs[i] = x;
                f(g, &vs)
            })
            .unwrap();
        let t = g.push_tangent(&trace, tv).unwrap();
        let analytic = g.value(t).clone();
        let mut xs = inputs.to_vec();
        xs[i] = inputs[i].add(&v.scaled(step));
        let fp = eval(f, &xs);
        xs[i] = inputs[i].sub(&v.scaled(step));
        let fm = eval(f, &xs);
        let numeric = fp.sub(&fm).scaled(1.0 / (2.0 * step));
        worst = worst.max(rel_err(analytic.data(), numeric.data()));
    }
    worst
}

pub fn tiny_config(op: NormOperator, placement: NormPlacement) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_block_layers: 1,
        norm_operator: op,
        norm_placement: placement,
        n_prelude_blocks: 0,
        n_coda_blocks: 0,
        vocab_size: 15,
        max_seq_len: 6,
        tie_embeddings: false,
        norm_eps: 1e-5,
    }
}

/// Parameters with gains and biases perturbed away from their 1/0 init so
/// every code path carries a nontrivial derivative.
pub fn perturbed(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
    let mut p = Parameters::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x51);
    for id in 0..p.len() {
        let noise = normal(p.get(id).shape(), &mut r);
        let t = p.get_mut(id);
        *t = t.add(&noise.scaled(0.1));
    }
    p
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor64>,
    pub f: Box<Build<'static>>,
}

fn case(name: &'static str, inputs: Vec<Tensor64>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Every differentiable graph primitive and composite, on random inputs
/// away from nondifferentiable points.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let r = &mut r;
    let x23 = |r: &mut Rng| normal(&[2, 3], r);
    let mut cases = vec![
        case("matmul", vec![normal(&[2, 3, 4], r), normal(&[4, 5], r)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_batched", vec![normal(&[2, 3, 4], r), normal(&[2, 4, 2], r)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("add", vec![x23(r), x23(r)], |g, v| g.add(v[0], v[1])),
        case("sub", vec![x23(r), x23(r)], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![x23(r), x23(r)], |g, v| g.mul(v[0], v[1])),
        case("add_row", vec![x23(r), normal(&[3], r)], |g, v| g.add_row(v[0], v[1])),
        case("mul_row", vec![x23(r), normal(&[3], r)], |g, v| g.mul_row(v[0], v[1])),
        case("mul_col", vec![x23(r), normal(&[2, 1], r)], |g, v| g.mul_col(v[0], v[1])),
        case("scale", vec![x23(r)], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", vec![x23(r)], |g, v| g.add_scalar(v[0], 0.3)),
        case("relu", vec![off_zero(&[2, 3], r)], |g, v| g.relu(v[0])),
        case("step", vec![off_zero(&[2, 3], r)], |g, v| g.step(v[0])),
        case("gelu", vec![x23(r)], |g, v| g.gelu(v[0])),
        case("tanh", vec![x23(r)], |g, v| g.tanh(v[0])),
        case("pow", vec![positive(&[2, 3], r)], |g, v| g.pow(v[0], 1.7)),
        case("pow_negative", vec![positive(&[2, 3], r)], |g, v| g.pow(v[0], -0.5)),
        case("softmax", vec![normal(&[2, 4], r)], |g, v| g.softmax(v[0])),
        case("causal_softmax", vec![normal(&[2, 3, 3], r)], |g, v| g.causal_softmax(v[0])),
        case("sum_last", vec![x23(r)], |g, v| g.sum_last(v[0])),
        case("mean_last", vec![x23(r)], |g, v| g.mean_last(v[0])),
        case("center_last", vec![x23(r)], |g, v| g.center_last(v[0])),
        case("inv_rms", vec![x23(r)], |g, v| g.inv_rms(v[0], 1e-5)),
        case("sum_all", vec![x23(r)], |g, v| g.sum_all(v[0])),
        case("mean_all", vec![x23(r)], |g, v| g.mean_all(v[0])),
        case("sq_norm", vec![x23(r)], |g, v| g.sq_norm(v[0])),
        case("gather", vec![normal(&[5, 3], r)], |g, v| g.gather(v[0], &[4, 0, 4, 2], &[2, 2])),
        case("concat", vec![x23(r), normal(&[1, 3], r)], |g, v| g.concat(&[v[0], v[1]])),
        case("slice", vec![normal(&[4, 3], r)], |g, v| g.slice(v[0], 1, 3)),
        case("reshape", vec![x23(r)], |g, v| g.reshape(v[0], &[3, 2])),
        case("permute", vec![normal(&[2, 3, 4], r)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![normal(&[2, 3, 4], r)], |g, v| g.transpose(v[0])),
        case("cross_entropy", vec![normal(&[2, 2, 5], r)], |g, v| {
            g.cross_entropy(v[0], &[1, 4, 0, 2], &[0.5, 0.0, 1.0, 0.25])
        }),
        case("linear", vec![x23(r), normal(&[3, 4], r), normal(&[4], r)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        case("simple_norm", vec![x23(r)], |g, v| g.simple_norm(v[0], 1e-5)),
        case("rms_norm", vec![x23(r), normal(&[3], r)], |g, v| g.rms_norm(v[0], v[1], 1e-5)),
        case("layer_norm", vec![normal(&[2, 4], r), normal(&[4], r), normal(&[4], r)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
    ];
    // a composite exercising the second-order rules: the tangent of tanh and
    // gelu through a normalised product
    cases.push(case("tanh_gelu_chain", vec![x23(r), normal(&[3, 3], r)], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let a = g.tanh(h)?;
        let b = g.gelu(a)?;
        g.simple_norm(b, 1e-5)
    }));
    cases
}

/// The recurrent block for every norm operator and placement. Inputs are
/// the block's parameters followed by the state `h: [2, 4, 8]`.
pub fn block_cases(seed: u64) -> Vec<Case> {
    let mut out = Vec::new();
    for op in NormOperator::ALL {
        for placement in NormPlacement::ALL {
            let cfg = tiny_config(op, placement);
            let params = perturbed(&cfg, seed);
            let mut r = rng(seed ^ 7);
            let mut inputs: Vec<Tensor64> = (0..params.len()).map(|i| params.get(i).clone()).collect();
            inputs.push(normal(&[2, 4, 8], &mut r));
            let n = params.len();
            let name: &'static str = Box::leak(format!("block_{op:?}_{placement:?}").into_boxed_str());
            out.push(case(name, inputs, move |g, v| {
                let bound = looplab::model::Bound::with_vars(&params, v[..n].to_vec());
                bound.recurrent_block(g, v[n])
            }));
        }
    }
    out
}

/// `‖J_h f(h; θ) v‖²` for the recurrent block, as a graph over parameter
/// leaves `0..n` with `h` and `v` constant.
pub fn jv_sq_norm(g: &mut Graph<f64>, params: &Parameters<f64>, vars: &[Var], h: &Tensor64, v: &Tensor64) -> Result<Var> {
    let bound = looplab::model::Bound::with_vars(params, vars.to_vec());
    let hv = g.constant(h.clone());
    let vv = g.constant(v.clone());
    let trace = g.trace(hv, |g, x| bound.recurrent_block(g, x))?;
    let jv = g.push_tangent(&trace, vv)?;
    g.sq_norm(jv)
}

/// Gradient of `‖Jv‖²` with respect to every parameter, reverse mode over
/// the tangent graph, against central differences of the exact JVP.
/// `stride` subsamples parameter entries for speed.
pub fn second_order_check(params: &Parameters<f64>, h: &Tensor64, v: &Tensor64, step: f64, stride: usize) -> f64 {
    let value_at = |p: &Parameters<f64>| {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let l = jv_sq_norm(&mut g, p, &vars, h, v).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let l = jv_sq_norm(&mut g, params, &vars, h, v).unwrap();
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for id in 0..params.len() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor64::zeros(params.get(id).shape()));
        for j in (id % stride..params.get(id).numel()).step_by(stride) {
            let x0 = params.get(id).data()[j];
            p.get_mut(id).data_mut()[j] = x0 + step;
            let fp = value_at(&p);
            p.get_mut(id).data_mut()[j] = x0 - step;
            let fm = value_at(&p);
            p.get_mut(id).data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(&[analytic.data()[j]], &[numeric]));
        }
    }
    worst
}

/// Random symmetric positive definite `n × n` matrix `B Bᵀ / n + 0.1 I`.
pub fn spd_matrix(n: usize, rng: &mut Rng) -> nalgebra::DMatrix<f64> {
    let b = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    &b * b.transpose() / n as f64 + nalgebra::DMatrix::identity(n, n) * 0.1
}

pub fn matrix_tensor(a: &nalgebra::DMatrix<f64>) -> Tensor64 {
    // row-major
    let (r, c) = a.shape();
    Tensor64::new(vec![r, c], a.transpose().as_slice().to_vec()).unwrap()
}

/// The map `x ↦ x · Aᵀ` on `x: [samples, n]`, i.e. `A` applied to each row.
pub fn linear_map(a: &nalgebra::DMatrix<f64>) -> impl FnOnce(&mut Graph<f64>, Var) -> Result<Var> {
    let at = matrix_tensor(&a.transpose());
    move |g, x| {
        let w = g.constant(at);
        g.matmul(x, w)
    }
}
