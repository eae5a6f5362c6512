//! Norm and convergence statistics of a latent trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trajectory;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    Diverged,
    Wandering,
}

/// Thresholds for [`trajectory_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Relative successive delta below which a step counts as stationary.
    pub tol_conv: f64,
    /// Number of trailing stationary steps required.
    pub window: usize,
    /// Growth over `‖h^(0)‖` that counts as divergence.
    pub div_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tol_conv: 1e-4,
            window: 3,
            div_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub verdict: Verdict,
    /// `‖h^(t)‖` for every state.
    pub state_norms: Vec<f64>,
    /// `‖h^(t+1) - h^(t)‖`, one shorter than `state_norms`.
    pub deltas: Vec<f64>,
    /// Start of the trailing run of stationary steps, when converged.
    pub first_converged_step: Option<usize>,
}

impl ConvergenceReport {
    /// `deltas[t] / max(1, ‖h^(t)‖)`.
    pub fn relative_deltas(&self) -> Vec<f64> {
        self.deltas
            .iter()
            .zip(&self.state_norms)
            .map(|(d, n)| d / n.max(1.0))
            .collect()
    }

    pub fn final_delta(&self) -> f64 {
        self.deltas.last().copied().unwrap_or(0.0)
    }
}

/// Classify a trajectory with the default thresholds.
pub fn trajectory_stats<S: Scalar>(traj: &Trajectory<S>) -> Result<ConvergenceReport> {
    convergence_report(&traj.states, Thresholds::default())
}

/// Classify a sequence of states. Converged takes precedence over diverged:
/// a trajectory that settles after growing is reported as converged.
pub fn convergence_report<S: Scalar>(states: &[Tensor<S>], th: Thresholds) -> Result<ConvergenceReport> {
    if states.len() < 2 {
        return Err(Error::contract(format!(
            "trajectory needs at least 2 states, got {}",
            states.len()
        )));
    }
    let state_norms: Vec<f64> = states.iter().map(|h| h.norm().to_f64_lossy()).collect();
    let deltas: Vec<f64> = states
        .windows(2)
        .map(|w| w[1].sub(&w[0]).norm().to_f64_lossy())
        .collect();
    let mut report = ConvergenceReport {
        verdict: Verdict::Wandering,
        state_norms,
        deltas,
        first_converged_step: None,
    };
    let rel = report.relative_deltas();
    let trailing = rel.iter().rev().take_while(|&&r| r <= th.tol_conv).count();
    let needed = th.window.max(1).min(rel.len());
    if trailing >= needed {
        report.verdict = Verdict::Converged;
        report.first_converged_step = Some(rel.len() - trailing);
        return Ok(report);
    }
    let base = report.state_norms[0];
    let peak = report.state_norms.iter().copied().fold(0.0, f64::max);
    if peak >= th.div_factor * base && peak > 0.0 {
        report.verdict = Verdict::Diverged;
    }
    Ok(report)
}

/// Mean per-token Euclidean norm of a `[..., d]` state.
pub fn mean_token_norm<S: Scalar>(h: &Tensor<S>) -> f64 {
    let rows: Vec<f64> = h
        .rows()
        .map(|r| r.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

/// Largest deviation of any token norm from `target`.
pub fn max_token_norm_deviation<S: Scalar>(h: &Tensor<S>, target: f64) -> f64 {
    h.rows()
        .map(|r| {
            let n = r.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            (n - target).abs()
        })
        .fold(0.0, f64::max)
}
