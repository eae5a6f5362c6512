//! In-memory training loop shared by the CLI and the test suites.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MonitorConfig};
use crate::arith::{exact_match_eval, make_batch, BatchSampler, DecodeMode, Sample};
use crate::error::Result;
use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::trainer::{StepMetrics, Trainer};

/// Training-set accuracy at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorPoint {
    pub step: u64,
    pub depth: usize,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub trainer: Trainer<S>,
    pub monitor: Vec<MonitorPoint>,
    /// Whether the accuracy target ended the run before `train.steps`.
    pub stopped_early: bool,
}

impl<S: Scalar> TrainOutcome<S> {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.monitor.last().map(|m| m.train_accuracy)
    }
}

/// Fresh trainer for `cfg` with parameters drawn from the init substream.
pub fn new_trainer<S: Scalar>(cfg: &ExperimentConfig) -> Result<Trainer<S>> {
    let params = Parameters::init(&cfg.model, cfg.seed)?;
    Trainer::new(params, cfg.train.clone())
}

/// Greedy exact match on the first `monitor.samples` training problems.
pub fn train_accuracy<S: Scalar>(params: &Parameters<S>, data: &[Sample], monitor: &MonitorConfig) -> Result<f64> {
    let n = monitor.samples.min(data.len()).max(1);
    exact_match_eval(params, &data[..n], monitor.depth, DecodeMode::Greedy, 256)
}

/// Run combined-objective steps until `cfg.train.steps` or the monitor's
/// accuracy target. `on_step` sees every step after its update.
pub fn train_loop<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &[Sample],
    mut trainer: Trainer<S>,
    mut on_step: impl FnMut(&Trainer<S>, &StepMetrics) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    let mut sampler = BatchSampler::new(data.len(), cfg.train.batch_size, cfg.seed);
    let mut monitor = Vec::new();
    let mon = &cfg.monitor;
    while trainer.step < cfg.train.steps {
        let idx = sampler.indices(trainer.step);
        let refs: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = make_batch(&refs, cfg.train.loss_mask);
        let metrics = trainer.stars_step(&batch)?;
        on_step(&trainer, &metrics)?;
        let done = trainer.step;
        if mon.every > 0 && (done % mon.every == 0 || done == cfg.train.steps) {
            let acc = train_accuracy(&trainer.params, data, mon)?;
            monitor.push(MonitorPoint {
                step: done,
                depth: mon.depth,
                train_accuracy: acc,
            });
            if mon.stop_at_accuracy.is_some_and(|target| acc >= target) {
                return Ok(TrainOutcome {
                    trainer,
                    monitor,
                    stopped_early: done < cfg.train.steps,
                });
            }
        }
    }
    Ok(TrainOutcome {
        trainer,
        monitor,
        stopped_early: false,
    })
}
