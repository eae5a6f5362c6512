//! Config-driven experiment driver behind the command-line tool.

mod commands;
mod config;
mod run;

pub use commands::{
    cmd_analyze, cmd_eval_sweep, cmd_gen_data, cmd_lambda_sweep, cmd_train, eval_samples, load_checked, load_dataset,
    prompt_tokens, sweep_options, write_sweep_csv, Analysis, LambdaRun, Manifest, RunArtifacts, TrajectoryPoint,
    ANALYSIS, CHECKPOINT, LAMBDA_SWEEP, MANIFEST, METRICS, MONITOR, SWEEP,
};
pub use config::{EvalConfig, ExperimentConfig, MonitorConfig};
pub use run::{new_trainer, train_accuracy, train_loop, MonitorPoint, TrainOutcome};
