//! Run configuration: defaults, TOML files and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hdetach_core::optim::ClipConfig;

use crate::engine::MaskGranularity;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copying,
    Transfer,
    Mnist,
    Pmnist,
    Verify,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copying" => Ok(Task::Copying),
            "transfer" => Ok(Task::Transfer),
            "mnist" => Ok(Task::Mnist),
            "pmnist" => Ok(Task::Pmnist),
            "verify" => Ok(Task::Verify),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSettings {
    pub enabled: bool,
    pub max_norm: f64,
}

impl ClipSettings {
    pub fn to_config(self) -> ClipConfig {
        if self.enabled {
            ClipConfig {
                enabled: true,
                max_norm: self.max_norm,
            }
        } else {
            ClipConfig::disabled()
        }
    }
}

/// Everything that determines a run. Two runs with equal configs produce
/// identical logs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Copying delay `T`.
    pub delay: usize,
    pub hidden_size: usize,
    /// Probability of detaching `h_{t−1}` at a step.
    pub detach_prob: f64,
    pub c_detach: bool,
    /// Probability of detaching `c_{t−1}` at a step when `c_detach` is set.
    pub detach_prob_c: f64,
    pub mask_granularity: MaskGranularity,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip: ClipSettings,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Stop once the validation metric reaches this value.
    pub stop_at: Option<f64>,
    /// Recheck forward equivalence every this many batches (0 disables).
    pub audit_every: usize,
    /// Directory with MNIST IDX files (`train-images-idx3-ubyte[.gz]` etc.).
    pub mnist_dir: Option<PathBuf>,
    /// 2×2 average pooling of MNIST images (196 steps instead of 784).
    pub downsample: bool,
    /// Seed of the fixed pixel permutation for `pmnist`.
    pub permutation_seed: u64,
    /// Delays evaluated by the transfer task.
    pub transfer_delays: Vec<usize>,
    pub transfer_count: usize,
    /// Checkpoint evaluated by the transfer task.
    pub checkpoint: Option<PathBuf>,
    /// Where logs, the config snapshot and checkpoints are written.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    /// Desk-scale copying: `T = 50`, 64 hidden units, 10k/2k sequences.
    fn default() -> Self {
        RunConfig {
            task: Task::Copying,
            delay: 50,
            hidden_size: 64,
            detach_prob: 0.0,
            c_detach: false,
            detach_prob_c: 0.0,
            mask_granularity: MaskGranularity::PerStep,
            lr: 1e-3,
            batch: 100,
            epochs: 150,
            clip: ClipSettings {
                enabled: true,
                max_norm: 1.0,
            },
            seed: 1,
            train_size: 10_000,
            val_size: 2_000,
            stop_at: None,
            audit_every: 50,
            mnist_dir: None,
            downsample: false,
            permutation_seed: 0,
            transfer_delays: vec![200, 400, 500, 1000, 2000, 5000],
            transfer_count: 1_000,
            checkpoint: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Full-size settings: hidden 128, 100k/5k copying sequences and
    /// 600 epochs; for MNIST 100 hidden units, 50k/10k images, 200 epochs.
    pub fn paper_scale(mut self) -> Self {
        match self.task {
            Task::Mnist | Task::Pmnist => {
                self.hidden_size = 100;
                self.train_size = 50_000;
                self.val_size = 10_000;
                self.epochs = 200;
                self.downsample = false;
            }
            _ => {
                self.hidden_size = 128;
                self.train_size = 100_000;
                self.val_size = 5_000;
                self.epochs = 600;
            }
        }
        self.batch = 100;
        self
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Effective cell-detach probability.
    pub fn cell_detach_prob(&self) -> f64 {
        if self.c_detach {
            self.detach_prob_c
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, p) in [("detach_prob", self.detach_prob), ("detach_prob_c", self.detach_prob_c)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.hidden_size == 0 || self.batch == 0 || self.train_size == 0 || self.val_size == 0 {
            return bad("hidden_size, batch, train_size and val_size must be positive".into());
        }
        if matches!(self.task, Task::Copying | Task::Transfer) && self.delay == 0 {
            return bad("delay must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.clip.enabled && !(self.clip.max_norm > 0.0 && self.clip.max_norm.is_finite()) {
            return bad(format!("clip.max_norm = {} must be positive", self.clip.max_norm));
        }
        if let Some(s) = self.stop_at {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("stop_at = {s} is outside [0, 1]"));
            }
        }
        if self.task == Task::Transfer && self.transfer_delays.contains(&0) {
            return bad("transfer delays must be at least 1".into());
        }
        Ok(())
    }
}
