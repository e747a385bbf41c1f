//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::CornersSpec;
use crate::model::ViLConfig;
use crate::optim::{AdamWConfig, WarmupCosine};
use crate::{Result, VilError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// `lr = base_lr · batch_size / lr_scale_divisor`.
    Linear,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Generator parameters; also used to check a dataset read from `path`.
    pub corners: CornersSpec,
    /// Directory written by `vil synth`; synthesised in memory when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ViLConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub seed: u64,
    pub epochs: u64,
    /// Stops early after this many optimiser steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "default_scaling")]
    pub lr_scaling: LrScaling,
    #[serde(default = "default_divisor")]
    pub lr_scale_divisor: f64,
    #[serde(default)]
    pub warmup_epochs: f64,
    #[serde(default = "default_end_lr")]
    pub end_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Steps between metric rows and evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

fn default_scaling() -> LrScaling {
    LrScaling::Linear
}
fn default_divisor() -> f64 {
    1024.0
}
fn default_end_lr() -> f64 {
    1e-6
}
fn default_wd() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    1.0
}
fn default_eval_every() -> u64 {
    100
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl TrainConfig {
    /// Micro backbone on the corners task with the default recipe.
    pub fn micro_corners(dim: usize, depth: usize) -> Self {
        let corners = CornersSpec::default();
        let mut model = ViLConfig::micro(dim, depth, corners.num_classes);
        model.image_size = corners.image_size;
        model.patch_size = corners.patch_size;
        Self {
            model,
            dataset: DatasetConfig { corners, path: None },
            seed: 0,
            epochs: 10,
            max_steps: None,
            batch_size: 32,
            base_lr: 3e-2,
            lr_scaling: LrScaling::Linear,
            lr_scale_divisor: 1024.0,
            warmup_epochs: 1.0,
            end_lr: 1e-6,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            optimizer: OptimizerConfig::default(),
            eval_every: 100,
            output_dir: default_out(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        // toml reports the line and column of the offending key
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| VilError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VilError::from(e).context(path.display().to_string()))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.corners.validate()?;
        let c = &self.dataset.corners;
        if c.image_size != self.model.image_size || c.num_classes != self.model.num_classes {
            return Err(VilError::config(format!(
                "dataset ({0}px, {1} classes) does not match model ({2}px, {3} classes)",
                c.image_size, c.num_classes, self.model.image_size, self.model.num_classes
            )));
        }
        if self.model.channels != 3 {
            return Err(VilError::config("the corners dataset has 3 channels"));
        }
        if self.batch_size == 0 {
            return Err(VilError::config("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.end_lr >= 0.0) || !(self.lr_scale_divisor > 0.0) {
            return Err(VilError::config("learning rates must be non-negative and the divisor positive"));
        }
        if !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip_norm >= 0.0) {
            return Err(VilError::config("warmup, weight decay and clip norm must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(VilError::config("eval_every must be positive"));
        }
        Ok(())
    }

    /// Peak learning rate after batch-size scaling.
    pub fn peak_lr(&self) -> f64 {
        match self.lr_scaling {
            LrScaling::Linear => self.base_lr * self.batch_size as f64 / self.lr_scale_divisor,
            LrScaling::None => self.base_lr,
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.corners.train_size.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.epochs * self.steps_per_epoch();
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            base_lr: self.peak_lr(),
            end_lr: self.end_lr,
            warmup_steps: (self.warmup_epochs * self.steps_per_epoch() as f64).round() as u64,
            total_steps: self.total_steps(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            weight_decay: self.weight_decay,
        }
    }
}
