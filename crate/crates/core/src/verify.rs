//! Gradient checking and kernel equivalence sweeps.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::{BackwardFault, Graph, Var};
use crate::mlstm::{self, GateInputs, KernelMode, QkvSequence};
use crate::model::{count_params, ForwardOptions, Model, ViLConfig};
use crate::par::{self, Execution};
use crate::tensor::Tensor;
use crate::{Real, Result, VilError};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Below this magnitude gradients are compared absolutely: round-off in
/// the difference quotient would otherwise dominate entries that are ~0.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d.is_nan() {
        f64::INFINITY
    } else {
        d / x.abs().max(y.abs()).max(REL_FLOOR)
    }
}

/// Largest elementwise `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

// --- model gradient check ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub status: GroupStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.status != GroupStatus::Fail)
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.status != GroupStatus::Skipped)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>7} {:>7} {:>12}  status", "group", "numel", "checked", "max_rel_err")?;
        for g in &self.groups {
            let status = match g.status {
                GroupStatus::Pass => "pass",
                GroupStatus::Fail => "FAIL",
                GroupStatus::Skipped => "skipped",
            };
            writeln!(
                f,
                "{:<32} {:>7} {:>7} {:>12.3e}  {status}",
                g.name, g.numel, g.checked, g.max_rel_err
            )?;
        }
        write!(f, "tolerance {:.1e}, worst {:.3e}", self.tolerance, self.worst())
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Refuse models larger than this.
    pub max_params: usize,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_per_group: Option<usize>,
    pub fault: Option<BackwardFault>,
    pub exec: Execution,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            max_params: 50_000,
            max_per_group: None,
            fault: None,
            exec: Execution::default(),
        }
    }
}

fn model_loss(
    model: &Model<f64>,
    image: &Tensor<f64>,
    label: usize,
    fault: Option<BackwardFault>,
) -> Result<(f64, Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_backward_fault(f);
    }
    let vars = model.bind(&mut g);
    let out = model.forward(&mut g, &vars, image, ForwardOptions::eval())?;
    let loss = g.cross_entropy(out.logits, label)?;
    Ok((g.value(loss)[0], g, loss, vars.all().to_vec()))
}

/// Analytic vs central-difference gradients of the cross-entropy loss,
/// per parameter tensor, in 64-bit.
pub fn gradcheck_model(
    model: &Model<f64>,
    image: &Tensor<f64>,
    label: usize,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let n = model.params().num_scalars();
    if n > opts.max_params {
        return Err(VilError::Usage(format!(
            "gradient check is limited to {} parameters, model has {n}",
            opts.max_params
        )));
    }
    let (_, mut g, loss, vars) = model_loss(model, image, label, opts.fault)?;
    g.backward(loss)?;
    let mut groups = Vec::new();
    for (i, spec) in model.params().specs().iter().enumerate() {
        let numel = spec.numel();
        if model.params().is_frozen(i) {
            groups.push(GroupReport {
                name: spec.name.clone(),
                numel,
                checked: 0,
                max_rel_err: 0.0,
                status: GroupStatus::Skipped,
            });
            continue;
        }
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let idx: Vec<usize> = match opts.max_per_group {
            Some(k) if k < numel => (0..k).map(|j| j * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let numeric = par::try_map_indices(opts.exec, idx.len(), |t| -> Result<f64> {
            let j = idx[t];
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut().tensors_mut()[i].data_mut()[j] += delta;
                Ok(model_loss(&m, image, label, None)?.0)
            };
            Ok((eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step))
        })?;
        let max_rel_err = idx
            .iter()
            .zip(&numeric)
            .map(|(&j, &num)| rel_err(analytic[j], num))
            .fold(0.0, f64::max);
        groups.push(GroupReport {
            name: spec.name.clone(),
            numel,
            checked: idx.len(),
            max_rel_err,
            status: if max_rel_err < opts.tolerance {
                GroupStatus::Pass
            } else {
                GroupStatus::Fail
            },
        });
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

/// A micro model with every parameter moved off its structured
/// initialisation (zero gate weights, unit gains), so every path carries
/// gradient, plus a random input image.
pub fn gradcheck_fixture(cfg: &ViLConfig, seed: u64) -> Result<(Model<f64>, Tensor<f64>, usize)> {
    count_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(cfg.clone(), &mut rng)?;
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let image = Tensor::standard_normal([cfg.image_size, cfg.image_size, cfg.channels], &mut rng);
    let label = rng.random_range(0..cfg.num_classes);
    Ok((model, image, label))
}

// --- mode equivalence ---------------------------------------------------------

/// Chunk size, possibly relative to the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkSpec {
    Fixed(usize),
    HalfLen,
    FullLen,
}

impl ChunkSpec {
    /// Concrete chunk size for length `len`; sizes above `len` behave like `len`.
    pub fn resolve(self, len: usize) -> usize {
        match self {
            ChunkSpec::Fixed(c) => c.min(len),
            ChunkSpec::HalfLen => (len / 2).max(1),
            ChunkSpec::FullLen => len,
        }
    }
}

impl FromStr for ChunkSpec {
    type Err = VilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" => Ok(ChunkSpec::FullLen),
            "L/2" => Ok(ChunkSpec::HalfLen),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(VilError::config(format!("invalid chunk size {n:?} (positive integer, L/2 or L)"))),
                Ok(c) => Ok(ChunkSpec::Fixed(c)),
            },
        }
    }
}

impl fmt::Display for ChunkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChunkSpec::Fixed(c) => write!(f, "{c}"),
            ChunkSpec::HalfLen => f.write_str("L/2"),
            ChunkSpec::FullLen => f.write_str("L"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCase {
    pub len: usize,
    pub dim: usize,
    pub chunk: usize,
    /// Worst trial.
    pub trial: usize,
    pub max_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub trials: usize,
    pub cases: Vec<EquivalenceCase>,
}

impl EquivalenceReport {
    pub fn worst(&self) -> Option<&EquivalenceCase> {
        self.cases.iter().max_by(|a, b| a.max_dev.total_cmp(&b.max_dev))
    }

    pub fn failures(&self) -> impl Iterator<Item = &EquivalenceCase> {
        self.cases.iter().filter(|c| !(c.max_dev < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

#[derive(Debug, Clone)]
pub struct EquivalenceSpec {
    pub lens: Vec<usize>,
    pub dims: Vec<usize>,
    pub chunks: Vec<ChunkSpec>,
    pub trials: usize,
    pub seed: u64,
}

pub(crate) fn random_instance<T: Real>(len: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<(QkvSequence<T>, GateInputs<T>)> {
    let mut draw = |n: usize| -> Vec<T> {
        (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut *rng);
                T::lit(x)
            })
            .collect()
    };
    let (q, k, v) = (draw(len * d), draw(len * d), draw(len * d));
    let gates = GateInputs {
        i_pre: draw(len),
        f_pre: draw(len),
    };
    Ok((QkvSequence::new(q, k, v, len, d, d)?, gates))
}

/// Largest pairwise deviation between recurrent, parallel and each chunked
/// form, for every `(L, d, C)` over `trials` random instances.
pub fn equivalence_sweep<T: Real>(spec: &EquivalenceSpec, tolerance: f64, exec: Execution) -> Result<EquivalenceReport> {
    if spec.lens.is_empty() || spec.dims.is_empty() || spec.chunks.is_empty() || spec.trials == 0 {
        return Err(VilError::Usage("equivalence sweep needs lengths, dims, chunks and trials".into()));
    }
    let mut cases = Vec::new();
    for &len in &spec.lens {
        for &d in &spec.dims {
            if len == 0 || d == 0 {
                return Err(VilError::config("lengths and dims must be positive"));
            }
            let chunks: Vec<usize> = spec.chunks.iter().map(|c| c.resolve(len)).collect();
            let per_trial = par::try_map_indices(exec, spec.trials, |trial| -> Result<Vec<f64>> {
                let seed = spec.seed ^ ((len as u64) << 40) ^ ((d as u64) << 20) ^ trial as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (qkv, gates) = random_instance::<T>(len, d, &mut rng)?;
                let rec = mlstm::forward(KernelMode::Recurrent, &qkv, &gates)?;
                let par_out = mlstm::forward(KernelMode::Parallel, &qkv, &gates)?;
                let base = crate::tensor::max_abs_diff(&rec, &par_out).as_f64();
                chunks
                    .iter()
                    .map(|&c| {
                        let ch = mlstm::forward(KernelMode::Chunkwise(c), &qkv, &gates)?;
                        let dev = crate::tensor::max_abs_diff(&rec, &ch)
                            .as_f64()
                            .max(crate::tensor::max_abs_diff(&par_out, &ch).as_f64());
                        Ok(dev.max(base))
                    })
                    .collect()
            })?;
            for (ci, &chunk) in chunks.iter().enumerate() {
                let (trial, max_dev) = per_trial
                    .iter()
                    .map(|devs| devs[ci])
                    .enumerate()
                    .fold((0, 0.0f64), |best, (t, v)| if v > best.1 || v.is_nan() { (t, v) } else { best });
                cases.push(EquivalenceCase {
                    len,
                    dim: d,
                    chunk,
                    trial,
                    max_dev,
                });
            }
        }
    }
    Ok(EquivalenceReport {
        precision: T::NAME,
        tolerance,
        trials: spec.trials,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_specs_parse() {
        assert_eq!("L".parse::<ChunkSpec>().unwrap(), ChunkSpec::FullLen);
        assert_eq!("L/2".parse::<ChunkSpec>().unwrap().resolve(9), 4);
        assert_eq!("8".parse::<ChunkSpec>().unwrap().resolve(5), 5);
        assert!("0".parse::<ChunkSpec>().is_err());
        assert_eq!(ChunkSpec::HalfLen.resolve(1), 1);
    }

    #[test]
    fn equivalence_degenerate_length() {
        let spec = EquivalenceSpec {
            lens: vec![1],
            dims: vec![4],
            chunks: vec![ChunkSpec::Fixed(1), ChunkSpec::FullLen],
            trials: 3,
            seed: 0,
        };
        let r = equivalence_sweep::<f32>(&spec, 1e-4, Execution::Sequential).unwrap();
        assert!(r.passed());
        assert_eq!(r.cases.len(), 2);
    }

    #[test]
    fn equivalence_small_sweep_in_both_precisions() {
        let spec = EquivalenceSpec {
            lens: vec![16, 33],
            dims: vec![8],
            chunks: vec![ChunkSpec::Fixed(1), ChunkSpec::Fixed(8), ChunkSpec::HalfLen, ChunkSpec::FullLen],
            trials: 5,
            seed: 7,
        };
        let r32 = equivalence_sweep::<f32>(&spec, 1e-4, Execution::Parallel).unwrap();
        assert!(r32.passed(), "{:?}", r32.worst());
        let r64 = equivalence_sweep::<f64>(&spec, 1e-10, Execution::Sequential).unwrap();
        assert!(r64.passed(), "{:?}", r64.worst());
        assert_eq!(r64.precision, "f64");
    }

    fn sampled() -> GradcheckOptions {
        GradcheckOptions {
            max_per_group: Some(12),
            ..Default::default()
        }
    }

    #[test]
    fn micro_model_gradients_pass() {
        let (model, image, label) = gradcheck_fixture(&ViLConfig::micro(8, 2, 3), 0).unwrap();
        let r = gradcheck_model(&model, &image, label, &sampled()).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.groups.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn injected_fault_is_reported() {
        let (model, image, label) = gradcheck_fixture(&ViLConfig::micro(8, 1, 3), 1).unwrap();
        let opts = GradcheckOptions {
            fault: Some(BackwardFault { op: "mlstm_parallel", scale: 1.5 }),
            ..sampled()
        };
        let r = gradcheck_model(&model, &image, label, &opts).unwrap();
        assert!(!r.passed());
        let failed: Vec<_> = r.groups.iter().filter(|g| g.status == GroupStatus::Fail).map(|g| g.name.as_str()).collect();
        assert!(failed.iter().any(|n| n.contains(".q.weight")), "{failed:?}");
        assert!(!failed.contains(&"head.weight"));
    }

    #[test]
    fn frozen_groups_are_skipped_and_size_capped() {
        let (mut model, image, label) = gradcheck_fixture(&ViLConfig::micro(8, 1, 3), 2).unwrap();
        model.params_mut().set_frozen(0, true);
        let r = gradcheck_model(&model, &image, label, &sampled()).unwrap();
        assert_eq!(r.groups[0].status, GroupStatus::Skipped);
        assert!(r.passed());
        let opts = GradcheckOptions {
            max_params: 10,
            ..sampled()
        };
        assert!(matches!(gradcheck_model(&model, &image, label, &opts), Err(VilError::Usage(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1e-9], &[0.0]), 1e-3);
        assert!(max_relative_error(&[f64::NAN], &[0.0]).is_infinite());
    }
}
