use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamConfig;
use crate::distill::Role;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SsimConfig};
use crate::networks::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub step1_epochs: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs per decay; counted globally across both steps.
    pub lr_decay_period: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            batch_size: 8,
            step1_epochs: 100,
            max_epochs: 200,
            initial_lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_period: 50,
        }
    }
}

/// Which terms of the collaborative objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Without cross-task training the second step keeps training the
    /// super-resolution network alone on its task loss.
    pub cross_task: bool,
    pub output_space: bool,
    pub affinity_space: bool,
    pub structure: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            cross_task: true,
            output_space: true,
            affinity_space: true,
            structure: true,
        }
    }
}

/// Named switches accepted by `train --ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Distillation weight set to zero.
    NoDistill,
    NoAffinity,
    NoStructure,
    /// Second step trains the super-resolution network alone.
    NoCrossTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleErrorSource {
    /// Running means over the training batches of the previous epoch.
    #[default]
    Training,
    /// Full pass over `data.validation` at the end of each epoch.
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Target side length of features before the affinity matrix is formed.
    pub pool_size: usize,
    pub role_errors: RoleErrorSource,
    /// Overrides role selection; the other network teaches.
    pub force_student: Option<Role>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            pool_size: 32,
            role_errors: RoleErrorSource::Training,
            force_student: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Shard directory written by `prepare`.
    pub shards: Option<PathBuf>,
    /// Shard directory for role-error scoring when `role_errors = "validation"`.
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a resumable checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub ssim: SsimConfig,
    pub distill: DistillConfig,
    pub components: Components,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl TrainConfig {
    /// Desk-scale settings used for the procedural toy data.
    pub fn toy() -> Self {
        TrainConfig {
            model: ModelConfig {
                scale: 4,
                stage_count: 2,
                channels: 16,
                residual_units: 1,
                sp_width: 8,
            },
            schedule: ScheduleConfig {
                batch_size: 16,
                step1_epochs: 30,
                max_epochs: 60,
                ..ScheduleConfig::default()
            },
            distill: DistillConfig {
                pool_size: 16,
                ..DistillConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::NoDistill => self.loss.rho2 = 0.0,
            Ablation::NoAffinity => self.components.affinity_space = false,
            Ablation::NoStructure => self.components.structure = false,
            Ablation::NoCrossTask => self.components.cross_task = false,
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = self.model.problems();
        let s = &self.schedule;
        if s.batch_size == 0 {
            p.push("schedule.batch_size must be at least 1".into());
        }
        if s.step1_epochs >= s.max_epochs {
            p.push(format!(
                "schedule.step1_epochs ({}) must be smaller than schedule.max_epochs ({})",
                s.step1_epochs, s.max_epochs
            ));
        }
        if !(s.initial_lr > 0.0) || !s.initial_lr.is_finite() {
            p.push(format!("schedule.initial_lr must be positive, got {}", s.initial_lr));
        }
        if !(s.lr_decay_factor > 0.0 && s.lr_decay_factor <= 1.0) {
            p.push(format!("schedule.lr_decay_factor must lie in (0, 1], got {}", s.lr_decay_factor));
        }
        if s.lr_decay_period == 0 {
            p.push("schedule.lr_decay_period must be at least 1".into());
        }
        p.extend(self.optimizer.problems());
        p.extend(self.loss.problems());
        p.extend(self.ssim.problems());
        if self.distill.pool_size == 0 {
            p.push("distill.pool_size must be at least 1".into());
        }
        if self.distill.role_errors == RoleErrorSource::Validation && self.data.validation.is_none() {
            p.push("distill.role_errors = \"validation\" requires data.validation".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
