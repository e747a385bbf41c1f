//! Wall-clock benchmarks of the mLSTM kernels against the analytic counts.
//!
//! Timing runs on the calling thread only; results assume the process has
//! the machine to itself.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flops::flops_mlstm;
use crate::mlstm::{self, KernelMode};
use crate::verify::{random_instance, ChunkSpec};
use crate::{Result, VilError};

pub const MIN_REPEATS: usize = 5;
/// Medians below this are dominated by timer resolution.
pub const RESOLUTION_MS: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub lens: Vec<usize>,
    /// Head width, used for both keys and values.
    pub dim: usize,
    pub parallel: bool,
    pub recurrent: bool,
    pub chunks: Vec<ChunkSpec>,
    pub repeats: usize,
    pub warmup: usize,
    /// Each timing sample repeats the kernel until it lasts at least this
    /// long; the reported time is per call. 0 times single calls.
    pub min_sample_ms: f64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            lens: vec![128, 256, 512, 1024, 2048],
            dim: 64,
            parallel: true,
            recurrent: true,
            chunks: vec![ChunkSpec::Fixed(16), ChunkSpec::Fixed(64), ChunkSpec::Fixed(256)],
            repeats: MIN_REPEATS,
            warmup: 1,
            min_sample_ms: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub mode: KernelMode,
    /// Per-call median.
    pub median_ms: f64,
    /// Calls per timing sample.
    pub batch: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dim: usize,
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(VilError::Usage("a power-law fit needs two or more positive points".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(VilError::Usage("a power-law fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Times every requested mode at every length; chunk sizes larger than
/// `L` are clamped to `L`.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.lens.is_empty() || spec.dim == 0 {
        return Err(VilError::Usage("bench needs at least one length and a positive width".into()));
    }
    if spec.repeats < MIN_REPEATS {
        return Err(VilError::Usage(format!("bench needs at least {MIN_REPEATS} repeats")));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &len in &spec.lens {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ len as u64);
        let (qkv, gates) = random_instance::<f32>(len, spec.dim, &mut rng)?;
        let mut modes = Vec::new();
        if spec.parallel {
            modes.push(KernelMode::Parallel);
        }
        if spec.recurrent {
            modes.push(KernelMode::Recurrent);
        }
        for c in &spec.chunks {
            let m = KernelMode::Chunkwise(c.resolve(len));
            if !modes.contains(&m) {
                modes.push(m);
            }
        }
        for mode in modes {
            let mut once_ms = f64::INFINITY;
            for _ in 0..spec.warmup.max(1) {
                let t = Instant::now();
                std::hint::black_box(mlstm::forward(mode, &qkv, &gates)?);
                once_ms = once_ms.min(t.elapsed().as_secs_f64() * 1e3);
            }
            let batch = ((spec.min_sample_ms / once_ms.max(1e-6)).ceil() as usize).clamp(1, 1 << 20);
            let mut times: Vec<f64> = (0..spec.repeats)
                .map(|_| {
                    let t = Instant::now();
                    for _ in 0..batch {
                        std::hint::black_box(mlstm::forward(mode, &qkv, &gates)?);
                    }
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<_>>()?;
            let sample_ms = median(&mut times);
            if sample_ms < RESOLUTION_MS {
                warnings.push(format!(
                    "L={len} {}: median {sample_ms:.3} ms is below the {RESOLUTION_MS} ms timer-resolution threshold",
                    mode.label()
                ));
            }
            let median_ms = sample_ms / batch as f64;
            rows.push(BenchRow {
                len,
                mode,
                median_ms,
                batch,
                flops: flops_mlstm(len, spec.dim, spec.dim, mode)?,
            });
        }
    }
    Ok(BenchReport {
        dim: spec.dim,
        rows,
        warnings,
    })
}

impl BenchReport {
    /// Fitted time exponent in `L` for one mode.
    pub fn exponent(&self, mode: KernelMode) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.len as f64, r.median_ms))
            .collect();
        fit_exponent(&pts)
    }

    /// Columns `L,C,mode,median_ms,flops`; `C` is empty for the
    /// parallel and recurrent modes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,C,mode,median_ms,flops\n");
        for r in &self.rows {
            let (c, name) = match r.mode {
                KernelMode::Chunkwise(c) => (c.to_string(), "chunkwise"),
                KernelMode::Parallel => (String::new(), "parallel"),
                KernelMode::Recurrent => (String::new(), "recurrent"),
            };
            s.push_str(&format!("{},{c},{name},{:.4},{}\n", r.len, r.median_ms, r.flops));
        }
        s
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:<14} {:>12} {:>14}", "L", "mode", "median ms", "MACs")?;
        for r in &self.rows {
            writeln!(f, "{:>6} {:<14} {:>12.3} {:>14}", r.len, r.mode.label(), r.median_ms, r.flops)?;
        }
        for mode in [KernelMode::Parallel, KernelMode::Recurrent] {
            if let Ok(e) = self.exponent(mode) {
                writeln!(f, "{} time exponent in L: {e:.3}", mode.label())?;
            }
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}
