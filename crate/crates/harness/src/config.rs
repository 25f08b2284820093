//! JSON run configuration.
//!
//! ```json
//! {
//!   "arch": "micro",
//!   "stages": [{"dim": 16, "heads": 1, "blocks": 1}, ...],
//!   "window_size": 4,
//!   "shuffle_sizes": [2, 2, 2, 1],
//!   "manipulation": "shuffle",
//!   "use_msg": true,
//!   "msg_input_policy": "learnable",
//!   "optimizer": {"lr": 0.0005, "weight_decay": 0.05},
//!   "schedule": {"warmup_steps": 30, "total_steps": 300, "batch_size": 16, "eval_every": 100},
//!   "data": {"source": "synthetic", "train": 1024, "val": 256, "size": 128, "noise": 0.1, "seed": 7},
//!   "seed": 0
//! }
//! ```
//!
//! Every key is optional; omitted keys take the defaults above. `stages`,
//! `window_size` and `shuffle_sizes` override the chosen preset.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msgt_core::arch::ArchConfig;
use msgt_core::block::Manipulation;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SyntheticSpec, ORIENTATIONS};
use crate::error::{HarnessError, Result};
use crate::idx::load_idx;
use crate::optim::{AdamWConfig, CosineSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgInputPolicy {
    /// Seed tokens are trained with the rest of the model.
    Learnable,
    /// Seed tokens keep their random initial values.
    FrozenRandom,
    /// Trained normally, then redrawn before evaluation.
    RerandomizeAtEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = AdamWConfig::default();
        Self { lr: 5e-4, min_lr: 1e-5, weight_decay: d.weight_decay, beta1: d.beta1, beta2: d.beta2, eps: d.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub label_smoothing: f64,
    pub drop_path: f64,
    /// When false the `seconds` column is written as 0 so reruns are byte-identical.
    pub record_wall_clock: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 30,
            total_steps: 300,
            batch_size: 16,
            eval_every: 100,
            label_smoothing: 0.1,
            drop_path: 0.0,
            record_wall_clock: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train: 1024,
            val: 256,
            size: 128,
            noise: 0.1,
            seed: 7,
            num_classes: ORIENTATIONS.len(),
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: String,
    pub stages: Option<Vec<StageOverride>>,
    pub window_size: Option<usize>,
    pub shuffle_sizes: Option<Vec<usize>>,
    pub manipulation: String,
    pub use_msg: bool,
    pub msg_input_policy: MsgInputPolicy,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: "micro".into(),
            stages: None,
            window_size: None,
            shuffle_sizes: None,
            manipulation: "shuffle".into(),
            use_msg: true,
            msg_input_policy: MsgInputPolicy::Learnable,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves the architecture with every override applied and validated.
    pub fn arch_config(&self) -> Result<ArchConfig> {
        let mut cfg = ArchConfig::preset(&self.arch, self.data.num_classes)?;
        cfg.input_size = (self.data.size, self.data.size);
        if let Some(stages) = &self.stages {
            if stages.len() != cfg.stages.len() {
                return Err(invalid(format!("expected {} stages, got {}", cfg.stages.len(), stages.len())));
            }
            for (s, o) in cfg.stages.iter_mut().zip(stages) {
                s.dim = o.dim;
                s.num_heads = o.heads;
                s.num_blocks = o.blocks;
            }
        }
        if let Some(w) = self.window_size {
            for s in &mut cfg.stages {
                s.window_size = w;
            }
        }
        if let Some(sizes) = &self.shuffle_sizes {
            if sizes.len() != cfg.stages.len() {
                return Err(invalid(format!("expected {} shuffle sizes, got {}", cfg.stages.len(), sizes.len())));
            }
            cfg = cfg.with_shuffle_sizes(sizes);
        }
        cfg.manipulation = Manipulation::from_str(&self.manipulation)?;
        cfg.use_msg = self.use_msg;
        cfg.drop_path = self.schedule.drop_path;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adamw(&self) -> AdamWConfig {
        let o = &self.optimizer;
        AdamWConfig { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    pub fn lr_schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.optimizer.lr,
            min_lr: self.optimizer.min_lr,
            warmup_steps: self.schedule.warmup_steps,
            total_steps: self.schedule.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if s.total_steps == 0 || s.warmup_steps >= s.total_steps {
            return Err(invalid(format!(
                "warmup steps ({}) must be fewer than total steps ({})",
                s.warmup_steps, s.total_steps
            )));
        }
        if s.eval_every == 0 {
            return Err(invalid("eval interval must be at least 1"));
        }
        if !(0.0..1.0).contains(&s.label_smoothing) {
            return Err(invalid(format!("label smoothing {} outside [0, 1)", s.label_smoothing)));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.min_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(invalid("optimizer rates must be non-negative and eps positive"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(invalid("optimizer betas must lie in [0, 1)"));
        }
        let d = &self.data;
        if d.train == 0 || d.val == 0 {
            return Err(invalid("train and validation splits must be non-empty"));
        }
        if d.source == DataSource::Synthetic && d.num_classes != ORIENTATIONS.len() {
            return Err(invalid(format!("the synthetic task has {} classes", ORIENTATIONS.len())));
        }
        if d.source == DataSource::Idx && (d.train_images.is_none() || d.train_labels.is_none()) {
            return Err(invalid("idx data needs train_images and train_labels"));
        }
        self.arch_config()?;
        Ok(())
    }

    /// Train and validation splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let spec = |n, seed| SyntheticSpec { n, size: d.size, noise: d.noise, seed };
                let train = generate_synthetic(&spec(d.train, d.seed))?;
                let val = generate_synthetic(&spec(d.val, d.seed.wrapping_add(0x9e37_79b9)))?;
                Ok((train, val))
            }
            DataSource::Idx => {
                let path = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| invalid(format!("idx data needs {key}")));
                let train = load_idx(
                    &path(&d.train_images, "train_images")?,
                    &path(&d.train_labels, "train_labels")?,
                    d.size,
                    d.num_classes,
                )?;
                let val = match (&d.val_images, &d.val_labels) {
                    (Some(i), Some(l)) => load_idx(i, l, d.size, d.num_classes)?,
                    _ => return Err(invalid("idx data needs val_images and val_labels")),
                };
                Ok((train, val))
            }
        }
    }
}
