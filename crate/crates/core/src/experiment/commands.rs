//! Subcommand implementations. Each writes its artifacts below the run
//! directory `output_dir/run_name` (or `output_dir/data` for datasets).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{new_trainer, train_loop, MonitorPoint};
use crate::arith::{
    eval_sweep, generate_dataset, held_out, read_dataset, write_dataset, ArithVocab, Sample, SweepOptions, SweepRow,
    SWEEP_HEADER,
};
use crate::dynamics::{estimate_spectral_radius, pca_states, trajectory_stats, ConvergenceReport, PcaResult, SpectralProbe};
use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, Parameters};
use crate::scalar::Scalar;
use crate::trainer::{OptimizerState, Trainer};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const MONITOR: &str = "monitor.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const SWEEP: &str = "sweep.csv";
pub const ANALYSIS: &str = "analysis.json";
pub const LAMBDA_SWEEP: &str = "lambda_sweep.csv";

/// Write the dataset and its descriptor; reuse an identical existing file.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let samples = generate_dataset(&cfg.data)?;
    write_dataset(&path, &cfg.data, &samples)?;
    Ok(path)
}

/// Training problems for `cfg`, read from disk when present.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let path = cfg.dataset_path();
    if path.exists() {
        let samples = read_dataset(&path)?;
        if samples.len() == cfg.data.n_samples {
            return Ok(samples);
        }
    }
    cmd_gen_data(cfg)?;
    read_dataset(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_name: String,
    pub config_hash: String,
    pub code_version: String,
    pub precision: u32,
    pub steps_completed: u64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: Manifest,
    pub monitor: Vec<MonitorPoint>,
}

fn save_trainer<S: Scalar>(trainer: &Trainer<S>, cfg_hash: &str, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_parameters(&trainer.params);
    ck.metadata = serde_json::json!({
        "step": trainer.step,
        "optimizer_step": trainer.optimizer.t,
        "config_hash": cfg_hash,
    });
    for (id, (name, _)) in trainer.params.iter().enumerate() {
        ck.push_aux(&format!("adam/m/{name}"), trainer.optimizer.m[id].clone());
        ck.push_aux(&format!("adam/v/{name}"), trainer.optimizer.v[id].clone());
    }
    ck.save(path)
}

fn restore_trainer<S: Scalar>(cfg: &ExperimentConfig, ck: &Checkpoint<S>) -> Result<Trainer<S>> {
    let params = ck.parameters()?;
    let mut trainer = Trainer::new(params, cfg.train.clone())?;
    let meta = |key: &str| {
        ck.metadata
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("metadata field {key} missing")))
    };
    trainer.step = meta("step")?;
    let mut opt = OptimizerState::new(&trainer.params);
    opt.t = meta("optimizer_step")?;
    for (id, (name, p)) in trainer.params.iter().enumerate() {
        for (slot, kind) in [(&mut opt.m, "m"), (&mut opt.v, "v")] {
            let t = ck
                .aux(&format!("adam/{kind}/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} missing")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has wrong shape")));
            }
            slot[id] = t.clone();
        }
    }
    trainer.optimizer = opt;
    Ok(trainer)
}

/// Keep only log records with `step < keep_below`.
fn truncate_log(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: String = fs::read_to_string(path)?
        .lines()
        .filter(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s < keep_below)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Train, resuming from the run directory's checkpoint when one exists.
pub fn cmd_train<S: Scalar>(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)?;
    let hash = cfg.hash()?;
    let ckpt_path = run_dir.join(CHECKPOINT);
    let metrics_path = run_dir.join(METRICS);
    let monitor_path = run_dir.join(MONITOR);

    let trainer = if ckpt_path.exists() {
        let ck = Checkpoint::<S>::load(&ckpt_path)?;
        let stored = ck.metadata.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if stored != hash {
            return Err(Error::Checkpoint(format!(
                "{} belongs to a different configuration; choose another run_name or remove it",
                ckpt_path.display()
            )));
        }
        restore_trainer(cfg, &ck)?
    } else {
        new_trainer::<S>(cfg)?
    };
    let start = trainer.step;
    truncate_log(&metrics_path, start)?;
    truncate_log(&monitor_path, start + 1)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;

    let mut log = BufWriter::new(File::options().create(true).append(true).open(&metrics_path)?);
    let every = cfg.train.checkpoint_every;
    let result = train_loop(cfg, &data, trainer, |tr, m| {
        serde_json::to_writer(&mut log, m)?;
        log.write_all(b"\n")?;
        if every > 0 && tr.step % every == 0 && tr.step < cfg.train.steps {
            log.flush()?;
            save_trainer(tr, &hash, &run_dir.join(format!("checkpoint_{:08}.ckpt", tr.step)))?;
            save_trainer(tr, &hash, &ckpt_path)?;
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let step = match &e {
                Error::NonFiniteLoss { step } => Some(*step),
                _ => None,
            };
            serde_json::to_writer(&mut log, &serde_json::json!({ "step": step, "error": e.to_string() }))?;
            log.write_all(b"\n")?;
            log.flush()?;
            return Err(e);
        }
    };
    log.flush()?;
    drop(log);
    save_trainer(&outcome.trainer, &hash, &ckpt_path)?;
    let mut mon = String::new();
    for p in &outcome.monitor {
        mon.push_str(&serde_json::to_string(p)?);
        mon.push('\n');
    }
    File::options().create(true).append(true).open(&monitor_path)?.write_all(mon.as_bytes())?;

    let mut artifacts: Vec<String> = fs::read_dir(&run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST && !n.ends_with(".tmp"))
        .collect();
    artifacts.sort();
    let manifest = Manifest {
        run_name: cfg.run_name.clone(),
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        precision: S::PRECISION.bits(),
        steps_completed: outcome.trainer.step,
        artifacts,
    };
    fs::write(run_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunArtifacts {
        run_dir,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        manifest,
        monitor: outcome.monitor,
    })
}

/// Load a checkpoint and check it against the configured model.
pub fn load_checked<S: Scalar>(cfg: &ExperimentConfig, path: &Path) -> Result<Parameters<S>> {
    let ck = Checkpoint::<S>::load(path)?;
    if ck.config != cfg.model {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    ck.parameters()
}

/// Held-out evaluation problems, disjoint from the training set.
pub fn eval_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let train = generate_dataset(&cfg.data)?;
    held_out(&cfg.data, &train, cfg.eval.n_samples, cfg.seed)
}

pub fn sweep_options(cfg: &ExperimentConfig) -> SweepOptions {
    SweepOptions {
        mode: cfg.eval.mode,
        eval_batch: cfg.eval.eval_batch,
        power_steps: cfg.eval.power_steps,
        seed: cfg.seed,
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Accuracy and dynamics at each configured depth; writes `sweep.csv`.
pub fn cmd_eval_sweep<S: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, Vec<SweepRow>)> {
    let params = load_checked::<S>(cfg, checkpoint)?;
    let samples = eval_samples(cfg)?;
    let rows = eval_sweep(&params, &samples, &cfg.eval.t_values, &sweep_options(cfg))?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join(SWEEP);
    write_sweep_csv(&path, &rows)?;
    Ok((path, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub state_norm: f64,
    /// `‖h^(t) - h^(t-1)‖`; absent at `t = 0`.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub input: String,
    pub input_tokens: Vec<usize>,
    pub depth: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    pub pca: Option<PcaResult>,
    pub convergence: ConvergenceReport,
    pub probes: Vec<SpectralProbe>,
    /// Greedy answer decoded at `depth`.
    pub decoded_answer: String,
}

/// Prompt tokens for `A+B` or `A+B=C` (the answer part is ignored).
pub fn prompt_tokens(input: &str) -> Result<Vec<usize>> {
    let lhs = input.split('=').next().unwrap_or("").trim();
    let mut ids = vec![ArithVocab::BOS];
    ids.extend(ArithVocab.encode(lhs)?);
    ids.push(ArithVocab::EQUALS);
    Ok(ids)
}

/// Trajectory, PCA, convergence and spectral probes for one input; writes
/// `analysis.json`.
pub fn cmd_analyze<S: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, input: &str, depth: usize) -> Result<(PathBuf, Analysis)> {
    let params = load_checked::<S>(cfg, checkpoint)?;
    let tokens = prompt_tokens(input)?;
    let (_, traj) = forward(&params, &tokens, depth, true)?;
    let traj = traj.expect("recorded");
    let report = trajectory_stats(&traj)?;
    let pca = match pca_states(&traj.states) {
        Ok(p) => Some(p),
        Err(Error::DegenerateCovariance) | Err(Error::Contract(_)) => None,
        Err(e) => return Err(e),
    };
    let k = cfg.eval.power_steps.max(1);
    let probes = traj
        .states
        .iter()
        .enumerate()
        .map(|(t, h)| estimate_spectral_radius(&params, h, k, cfg.seed, t))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = (0..traj.len())
        .map(|t| TrajectoryPoint {
            t,
            state_norm: report.state_norms[t],
            delta: t.checked_sub(1).map(|p| report.deltas[p]),
        })
        .collect();
    let decoded = crate::arith::greedy_decode(&params, &[&tokens[..]], depth, cfg.data.max_answer_digits() + 1, 1)?;
    let answer = ArithVocab.decode(&decoded[0].0)?;
    let analysis = Analysis {
        input: input.to_string(),
        input_tokens: tokens,
        depth,
        trajectory,
        pca,
        convergence: report,
        probes,
        decoded_answer: answer,
    };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join(ANALYSIS);
    fs::write(&path, serde_json::to_string_pretty(&analysis)? + "\n")?;
    Ok((path, analysis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRun {
    pub lambda: f64,
    pub run_name: String,
    pub final_train_accuracy: Option<f64>,
    pub rows: Vec<SweepRow>,
    pub error: Option<String>,
}

/// One training run and sweep per λ, sharing data and seeds. Failures are
/// recorded and the sweep moves on.
pub fn cmd_lambda_sweep<S: Scalar>(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<(PathBuf, Vec<LambdaRun>)> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let mut runs = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.train.lambda_weight = lambda;
        c.run_name = format!("{}_lambda_{lambda}", cfg.run_name);
        let attempt = (|| -> Result<(Option<f64>, Vec<SweepRow>)> {
            c.validate()?;
            let art = cmd_train::<S>(&c)?;
            let (_, rows) = cmd_eval_sweep::<S>(&c, &art.checkpoint)?;
            Ok((art.monitor.last().map(|m| m.train_accuracy), rows))
        })();
        runs.push(match attempt {
            Ok((acc, rows)) => LambdaRun {
                lambda,
                run_name: c.run_name,
                final_train_accuracy: acc,
                rows,
                error: None,
            },
            Err(e) => LambdaRun {
                lambda,
                run_name: c.run_name,
                final_train_accuracy: None,
                rows: Vec::new(),
                error: Some(e.to_string()),
            },
        });
    }
    let mut out = String::from("lambda,final_train_accuracy,");
    out.push_str(SWEEP_HEADER);
    out.push_str(",error\n");
    for r in &runs {
        let acc = r.final_train_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        if r.rows.is_empty() {
            out.push_str(&format!("{},{acc},,,,,,{err}\n", r.lambda));
        }
        for row in &r.rows {
            out.push_str(&format!("{},{acc},{},{err}\n", r.lambda, row.csv()));
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{}_{LAMBDA_SWEEP}", cfg.run_name));
    fs::write(&path, out)?;
    Ok((path, runs))
}
