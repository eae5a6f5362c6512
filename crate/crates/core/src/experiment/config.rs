//! Experiment description read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arith::{ArithVocab, DatasetSpec, DecodeMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Precision;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_t_values")]
    pub t_values: Vec<usize>,
    /// Held-out problems drawn for sweeps (disjoint from the training set).
    #[serde(default = "default_eval_samples")]
    pub n_samples: usize,
    /// Power steps for spectral estimates; 0 disables them.
    #[serde(default = "default_power_steps")]
    pub power_steps: usize,
    #[serde(default = "default_mode")]
    pub mode: DecodeMode,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_t_values() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64, 128]
}

fn default_eval_samples() -> usize {
    200
}

fn default_power_steps() -> usize {
    20
}

fn default_mode() -> DecodeMode {
    DecodeMode::Greedy
}

fn default_eval_batch() -> usize {
    128
}

impl Default for EvalConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Periodic training-set accuracy checks during `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Check every this many steps; 0 disables monitoring.
    #[serde(default)]
    pub every: u64,
    /// Training problems scored per check.
    #[serde(default = "default_monitor_samples")]
    pub samples: usize,
    /// Loop depth used for the check.
    #[serde(default = "default_monitor_depth")]
    pub depth: usize,
    /// Stop once training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
}

fn default_monitor_samples() -> usize {
    500
}

fn default_monitor_depth() -> usize {
    4
}

impl Default for MonitorConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_run_name() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed. It replaces the data and training seeds so every
    /// random stream derives from one number.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_run_name")]
    pub run_name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DatasetSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 2×2 addition, small post-sandwich model.
    pub fn desk_scale() -> Self {
        let data = DatasetSpec::default();
        let mut cfg = ExperimentConfig {
            seed: 0,
            run_name: default_run_name(),
            output_dir: default_output_dir(),
            precision: default_precision(),
            model: ModelConfig::small(ArithVocab::SIZE, data.max_len()),
            train: TrainConfig::default(),
            data,
            eval: EvalConfig::default(),
            monitor: MonitorConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Install `seed` as the global seed and in every section that has one.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.vocab_size != ArithVocab::SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must be {} for the addition task",
                ArithVocab::SIZE
            )));
        }
        if self.model.max_seq_len < self.data.max_len() {
            return Err(Error::Config(format!(
                "model.max_seq_len {} is shorter than the longest sample ({})",
                self.model.max_seq_len,
                self.data.max_len()
            )));
        }
        if self.eval.t_values.is_empty() || self.eval.t_values.contains(&0) {
            return Err(Error::Config("eval.t_values must be nonempty with entries >= 1".into()));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_name {:?} is not a plain name", self.run_name)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output_dir.join("data").join(format!(
            "add_{}x{}_n{}_seed{}.txt",
            self.data.digits_a, self.data.digits_b, self.data.n_samples, self.data.seed
        ))
    }
}
