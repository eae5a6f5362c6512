//! Two-component PCA of a trajectory, one observation per flattened state.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trajectory;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Two orthonormal directions in the flattened state space.
    pub components: [Vec<f64>; 2],
    /// Coordinates of each centered state along `components`.
    pub projections: Vec<[f64; 2]>,
    /// Variance along each component (population normalisation), descending.
    pub explained_variance: [f64; 2],
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

pub fn pca_project<S: Scalar>(traj: &Trajectory<S>) -> Result<PcaResult> {
    pca_states(&traj.states)
}

/// PCA over `states`, each flattened to one vector.
///
/// The covariance has rank at most `n - 1` for `n` states, so the top
/// eigenvectors come from the `n × n` Gram matrix of centered states.
pub fn pca_states<S: Scalar>(states: &[Tensor<S>]) -> Result<PcaResult> {
    let n = states.len();
    if n < 3 {
        return Err(Error::contract(format!("PCA needs at least 3 states, got {n}")));
    }
    let dim = states[0].numel();
    if let Some(bad) = states.iter().find(|s| s.numel() != dim) {
        return Err(Error::ShapeMismatch {
            op: "pca",
            lhs: states[0].shape().to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    let mut mean = vec![0.0; dim];
    for s in states {
        for (m, x) in mean.iter_mut().zip(s.data()) {
            *m += x.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = states
        .iter()
        .map(|s| s.data().iter().zip(&mean).map(|(x, m)| x.to_f64_lossy() - m).collect())
        .collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]) / n as f64);
    let total_variance = gram.trace();
    if total_variance <= 0.0 {
        return Err(Error::DegenerateCovariance);
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let floor = total_variance * 1e-12;
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let mut c = vec![0.0; dim];
        if lambda > floor {
            let u = eig.eigenvectors.column(idx);
            for (i, row) in centered.iter().enumerate() {
                for (cj, x) in c.iter_mut().zip(row) {
                    *cj += u[i] * x;
                }
            }
            explained[slot] = lambda;
        }
        orthonormalize(&mut c, &components);
        components.push(c);
    }
    let projections = centered
        .iter()
        .map(|row| [dot(row, &components[0]), dot(row, &components[1])])
        .collect();
    let second = components.pop().expect("two components");
    let first = components.pop().expect("two components");
    Ok(PcaResult {
        components: [first, second],
        projections,
        explained_variance: explained,
        total_variance,
    })
}

/// Make `c` unit length and orthogonal to `basis`. A null `c` is replaced by
/// the first coordinate axis that survives the projection.
fn orthonormalize(c: &mut [f64], basis: &[Vec<f64>]) {
    let project = |c: &mut [f64]| {
        for b in basis {
            let d: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            c.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        c.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let mut norm = project(c);
    let mut axis = 0;
    while norm < 1e-8 && axis < c.len() {
        c.iter_mut().enumerate().for_each(|(i, x)| *x = if i == axis { 1.0 } else { 0.0 });
        norm = project(c);
        axis += 1;
    }
    c.iter_mut().for_each(|x| *x /= norm);
}
