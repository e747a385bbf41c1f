//! Training and evaluation loop.
//!
//! Each optimiser step builds one graph per sample of the batch (in
//! parallel through [`par`]), then averages the per-sample gradients in
//! batch order, so results do not depend on the execution strategy.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::dataset::{ImageSet, Split};
use crate::model::{save_checkpoint, ForwardOptions, Model};
use crate::optim::{clip_global_norm, AdamW};
use crate::par::{self, Execution};
use crate::{Real, Result, VilError};

pub const METRICS_HEADER: [&str; 6] = ["step", "loss", "train_acc", "eval_acc", "lr", "ms_per_step"];
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

/// One logged row; loss, accuracy and timing are averaged over the steps
/// since the previous row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub lr: f64,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: ImageSet,
    pub eval: ImageSet,
}

impl TrainData {
    /// Reads the splits from `dataset.path` or synthesises them.
    pub fn load(cfg: &TrainConfig, exec: Execution) -> Result<Self> {
        let spec = &cfg.dataset.corners;
        let data = match &cfg.dataset.path {
            Some(dir) => Self {
                train: ImageSet::read(dir.join("train")).map_err(|e| e.context(dir.display().to_string()))?,
                eval: ImageSet::read(dir.join("eval")).map_err(|e| e.context(dir.display().to_string()))?,
            },
            None => Self {
                train: spec.generate(Split::Train, exec)?,
                eval: spec.generate(Split::Eval, exec)?,
            },
        };
        let s = cfg.model.image_size;
        for set in [&data.train, &data.eval] {
            if (set.height, set.width, set.channels) != (s, s, cfg.model.channels) {
                return Err(VilError::config(format!(
                    "dataset images are {}×{}×{}, model expects {s}×{s}×{}",
                    set.height, set.width, set.channels, cfg.model.channels
                )));
            }
            if let Some(&l) = set.labels.iter().find(|&&l| l >= cfg.model.num_classes) {
                return Err(VilError::config(format!("label {l} outside {} classes", cfg.model.num_classes)));
            }
        }
        if data.train.is_empty() {
            return Err(VilError::config("empty training split"));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRecord>,
    pub steps: u64,
    /// Eval-mode accuracy over the whole training split after training.
    pub train_acc: f64,
    pub eval_acc: f64,
}

/// Eval-mode accuracy of `model` on `set`.
pub fn accuracy<T: Real>(model: &Model<T>, set: &ImageSet, exec: Execution) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let hits = par::try_map_indices(exec, set.len(), |i| -> Result<bool> {
        Ok(model.predict(&set.tensor(i))? == set.labels[i])
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / set.len() as f64)
}

struct SampleResult<T> {
    loss: f64,
    correct: bool,
    grads: Vec<Vec<T>>,
}

fn sample_step<T: Real>(
    model: &Model<T>,
    set: &ImageSet,
    index: usize,
    rng: &mut dyn RngCore,
) -> Result<SampleResult<T>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let image = set.tensor(index);
    let opts = ForwardOptions {
        training: true,
        rng: Some(rng),
        trace: None,
    };
    let out = model.forward(&mut g, &vars, &image, opts)?;
    let label = set.labels[index];
    let correct = crate::model::argmax(g.value(out.logits)) == label;
    let loss = g.cross_entropy(out.logits, label)?;
    let loss_value = g.value(loss)[0].as_f64();
    g.backward(loss)?;
    let grads = vars
        .all()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
        .collect();
    Ok(SampleResult {
        loss: loss_value,
        correct,
        grads,
    })
}

fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| VilError::Format(e.to_string()))?;
    w.write_record(METRICS_HEADER).map_err(|e| VilError::Format(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.4}", r.train_acc),
            format!("{:.4}", r.eval_acc),
            format!("{:.6e}", r.lr),
            format!("{:.3}", r.ms_per_step),
        ])
        .map_err(|e| VilError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics file written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| VilError::Format(e.to_string()))?;
    let header = r.headers().map_err(|e| VilError::Format(e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(VilError::Format(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| VilError::Format(e.to_string())))
        .collect()
}

fn drop_seed(seed: u64, step: u64, slot: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains a model from scratch. When `out` is given, the metrics CSV, the
/// final checkpoint and the resolved config are written there.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
    exec: Execution,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<T>::new(cfg.model.clone(), &mut init_rng)?;
    let mut opt = AdamW::<T>::new(cfg.adamw());
    let schedule = cfg.schedule();
    let decay = model.params().decay_flags();
    let total = cfg.total_steps();
    let n = data.train.len();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut metrics = Vec::new();
    let (mut w_loss, mut w_hits, mut w_seen, mut w_steps, mut w_ms) = (0.0, 0usize, 0usize, 0u64, 0.0);
    for step in 0..total {
        let started = Instant::now();
        if cursor >= n {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += batch.len();

        let current = &model;
        let results = par::try_map_indices(exec, batch.len(), |slot| {
            let mut rng = ChaCha8Rng::seed_from_u64(drop_seed(cfg.seed, step, slot));
            sample_step(current, &data.train, batch[slot], &mut rng)
        });
        // overflow inside the forward pass surfaces as a numeric error there
        let failure = match &results {
            Err(e) if matches!(e.root(), VilError::Numeric { .. }) => Some(e.to_string()),
            _ => None,
        };
        let mut grads: Vec<Vec<T>> = Vec::new();
        let mut loss = f64::NAN;
        let mut hits = 0;
        let failure = match failure {
            Some(msg) => Some(msg),
            None => {
                let results = results.map_err(|e| e.context(format!("step {step}")))?;
                let inv = 1.0 / batch.len() as f64;
                loss = results.iter().map(|r| r.loss).sum::<f64>() * inv;
                hits = results.iter().filter(|r| r.correct).count();
                grads = results[0].grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                for r in &results {
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x);
                    }
                }
                let scale = T::lit(inv);
                grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
                let finite = grads.iter().flatten().all(|g| g.is_finite());
                (!loss.is_finite() || !finite).then(|| format!("non-finite loss {loss} (gradients finite: {finite})"))
            }
        };
        if let Some(mut msg) = failure {
            if let Some(dir) = out {
                let path = dir.join(LAST_GOOD_FILE);
                save_checkpoint(&path, &cfg.model, model.params())?;
                write_metrics(&dir.join(METRICS_FILE), &metrics)?;
                msg.push_str(&format!("; last good parameters saved to {}", path.display()));
            }
            return Err(VilError::Numeric {
                step: step as usize,
                msg,
            });
        }
        if cfg.grad_clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
        }
        let lr = schedule.lr(step);
        opt.step(model.params_mut().tensors_mut(), &grads, &decay, lr)?;

        w_loss += loss;
        w_hits += hits;
        w_seen += batch.len();
        w_steps += 1;
        w_ms += started.elapsed().as_secs_f64() * 1e3;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == total {
            metrics.push(MetricsRecord {
                step: done,
                loss: w_loss / w_steps as f64,
                train_acc: w_hits as f64 / w_seen as f64,
                eval_acc: accuracy(&model, &data.eval, exec)?,
                lr,
                ms_per_step: w_ms / w_steps as f64,
            });
            (w_loss, w_hits, w_seen, w_steps, w_ms) = (0.0, 0, 0, 0, 0.0);
        }
    }

    let train_acc = accuracy(&model, &data.train, exec)?;
    let eval_acc = accuracy(&model, &data.eval, exec)?;
    if let Some(dir) = out {
        write_metrics(&dir.join(METRICS_FILE), &metrics)?;
        save_checkpoint(dir.join(CHECKPOINT_FILE), &cfg.model, model.params())?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        steps: total,
        train_acc,
        eval_acc,
    })
}

/// Output directory for a run: `override_dir` when given, else the config's.
pub fn output_dir(cfg: &TrainConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}
