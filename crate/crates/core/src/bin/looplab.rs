use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use looplab::experiment::{self, ExperimentConfig};
use looplab::{Error, Precision, Result, Scalar};

/// Looped transformer experiments on multi-digit addition.
#[derive(Parser)]
#[command(name = "looplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, replacing `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Floating-point width for parameters and activations.
    #[arg(long, value_enum)]
    precision: Option<Bits>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the addition dataset and its descriptor.
    GenData(Common),
    /// Train (or resume) the configured run.
    Train(Common),
    /// Accuracy and state statistics across loop depths.
    EvalSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trajectory, PCA, convergence and spectral probes for one input.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Problem such as `12+34` (an `=C` suffix is ignored).
        #[arg(long)]
        input: String,
        /// Loop depth; defaults to the largest configured eval depth.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Train and sweep one run per regularization weight.
    LambdaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(bits) = common.precision {
        cfg.precision = match bits {
            Bits::F32 => Precision::F32,
            Bits::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_or_default(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.run_dir().join(experiment::CHECKPOINT))
}

fn run<S: Scalar>(command: &Command, cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(match command {
        Command::GenData(_) => {
            let path = experiment::cmd_gen_data(cfg)?;
            serde_json::json!({ "dataset": path })
        }
        Command::Train(_) => {
            let art = experiment::cmd_train::<S>(cfg)?;
            serde_json::json!({
                "checkpoint": art.checkpoint,
                "metrics": art.metrics,
                "steps_completed": art.manifest.steps_completed,
                "config_hash": art.manifest.config_hash,
                "train_accuracy": art.monitor.last().map(|m| m.train_accuracy),
            })
        }
        Command::EvalSweep { checkpoint, .. } => {
            let ck = checkpoint_or_default(cfg, checkpoint);
            let (path, rows) = experiment::cmd_eval_sweep::<S>(cfg, &ck)?;
            serde_json::json!({ "sweep": path, "rows": rows })
        }
        Command::Analyze {
            checkpoint,
            input,
            depth,
            ..
        } => {
            let ck = checkpoint_or_default(cfg, checkpoint);
            let depth = depth.unwrap_or_else(|| cfg.eval.t_values.iter().copied().max().unwrap_or(1));
            let (path, a) = experiment::cmd_analyze::<S>(cfg, &ck, input, depth)?;
            serde_json::json!({
                "analysis": path,
                "verdict": a.convergence.verdict,
                "decoded_answer": a.decoded_answer,
            })
        }
        Command::LambdaSweep { lambdas, .. } => {
            let (path, runs) = experiment::cmd_lambda_sweep::<S>(cfg, lambdas)?;
            let failed = runs.iter().filter(|r| r.error.is_some()).count();
            serde_json::json!({ "table": path, "runs": runs.len(), "failed": failed })
        }
    })
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => "numeric",
        Error::UnsupportedTangent { .. } => "unsupported_tangent",
        Error::Contract(_) => "contract",
        Error::Vocabulary { .. } | Error::Encode(_) => "vocabulary",
        Error::Capacity { .. } => "capacity",
        Error::DegenerateCovariance => "degenerate_covariance",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::GenData(c) | Command::Train(c) => c,
        Command::EvalSweep { common, .. } | Command::Analyze { common, .. } | Command::LambdaSweep { common, .. } => {
            common
        }
    };
    let result = load(common).and_then(|cfg| match cfg.precision {
        Precision::F32 => run::<f32>(&cli.command, &cfg),
        Precision::F64 => run::<f64>(&cli.command, &cfg),
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": kind(&e), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
