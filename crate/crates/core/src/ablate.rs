//! Block-design and pooling ablations on the corners task.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::model::{count_params, Pooling};
use crate::par::Execution;
use crate::train::{train, TrainData};
use crate::traversal::BlockDesign;
use crate::{Result, VilError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub design: BlockDesign,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Shared recipe; each row overrides the design and pooling.
    pub train: TrainConfig,
}

impl AblationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| VilError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.rows.is_empty() {
            return Err(VilError::config("an ablation needs seeds and rows"));
        }
        for row in &self.rows {
            self.row_config(row, self.seeds[0])?.validate()?;
        }
        Ok(())
    }

    fn row_config(&self, row: &AblationRow, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.model.block_design = row.design.clone();
        cfg.model.pooling = row.pooling;
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub design: String,
    pub pooling: Pooling,
    pub seed: u64,
    pub params: usize,
    pub feature_dim: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub design: String,
    pub pooling: Pooling,
    pub params: usize,
    pub feature_dim: usize,
    pub mean_train_acc: f64,
    pub mean_eval_acc: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn find(&self, design: &str, pooling: Pooling) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.design == design && s.pooling == pooling)
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("design,pooling,seed,params,feature_dim,train_acc,eval_acc\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                r.design,
                r.pooling.label(),
                r.seed,
                r.params,
                r.feature_dim,
                r.train_acc,
                r.eval_acc
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("design,pooling,params,feature_dim,seeds,mean_train_acc,mean_eval_acc\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                r.design,
                r.pooling.label(),
                r.params,
                r.feature_dim,
                r.seeds,
                r.mean_train_acc,
                r.mean_eval_acc
            ));
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:<17} {:>8} {:>5} {:>10} {:>10}",
            "design", "pooling", "params", "dim", "train_acc", "eval_acc"
        )?;
        for r in &self.summary {
            writeln!(
                f,
                "{:<12} {:<17} {:>8} {:>5} {:>10.4} {:>10.4}",
                r.design,
                r.pooling.label(),
                r.params,
                r.feature_dim,
                r.mean_train_acc,
                r.mean_eval_acc
            )?;
        }
        Ok(())
    }
}

/// Trains every (row, seed) pair on the same dataset. Per-run and summary
/// CSVs go to `out` when given.
pub fn run_ablation(cfg: &AblationConfig, out: Option<&Path>, exec: Execution) -> Result<AblationReport> {
    cfg.validate()?;
    let data = TrainData::load(&cfg.train, exec)?;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for row in &cfg.rows {
        let label = row.design.label();
        let mut these = Vec::new();
        for &seed in &cfg.seeds {
            let rc = cfg.row_config(row, seed)?;
            let outcome = train::<f32>(&rc, &data, None, exec).map_err(|e| e.context(format!("{label}/{} seed {seed}", row.pooling.label())))?;
            these.push(AblationRun {
                design: label.clone(),
                pooling: row.pooling,
                seed,
                params: count_params(&rc.model)?,
                feature_dim: row.pooling.feature_dim(rc.model.dim),
                train_acc: outcome.train_acc,
                eval_acc: outcome.eval_acc,
            });
        }
        let n = these.len() as f64;
        summary.push(AblationSummary {
            design: label,
            pooling: row.pooling,
            params: these[0].params,
            feature_dim: these[0].feature_dim,
            mean_train_acc: these.iter().map(|r| r.train_acc).sum::<f64>() / n,
            mean_eval_acc: these.iter().map(|r| r.eval_acc).sum::<f64>() / n,
            seeds: these.len(),
        });
        runs.extend(these);
    }
    let report = AblationReport { runs, summary };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation_runs.csv"), report.runs_csv())?;
        std::fs::write(dir.join("ablation_summary.csv"), report.summary_csv())?;
    }
    Ok(report)
}
