//! Analytic multiply-accumulate counts.
//!
//! One MAC is one unit. The counts follow the same conventions as the
//! graph's instrumented counter (elementwise ops and norms cost their
//! tensor size, shape ops are free) so the two can be compared directly;
//! the only deliberate difference is the mLSTM core, where masked entries
//! of the L×L score matrix are omitted.

use std::fmt;

use serde::Serialize;

use crate::mlstm::KernelMode;
use crate::model::{ConvKind, DropSchedule, Pooling, ViLConfig};
use crate::{Result, VilError};

/// MAC breakdown of one mLSTM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MlstmFlops {
    /// Causally masked score and value products inside each chunk.
    pub intra: u64,
    /// Inter-chunk state readout, accumulation and decay.
    pub state: u64,
    /// Normaliser and output scaling.
    pub norm: u64,
}

impl MlstmFlops {
    pub fn total(&self) -> u64 {
        self.intra + self.state + self.norm
    }
}

/// Chunk lengths used by the chunkwise kernel: full chunks of `c`, then a
/// shorter remainder.
pub fn chunk_lengths(len: usize, c: usize) -> Vec<usize> {
    let mut out = vec![c; len / c];
    if len % c != 0 {
        out.push(len % c);
    }
    out
}

fn chunked(len: u64, chunks: &[usize], dqk: u64, dv: u64) -> MlstmFlops {
    let sq: u64 = chunks.iter().map(|&c| (c as u64) * (c as u64)).sum();
    let intra = (sq * (dqk + dv)).div_ceil(2);
    let per_row = dqk * dv + dqk;
    let first = *chunks.first().unwrap_or(&0) as u64;
    let last = *chunks.last().unwrap_or(&0) as u64;
    let boundaries = chunks.len() as u64 - 1;
    // queries after the first chunk read the state; keys before the last
    // chunk are written into it; each boundary decays it once.
    let state = (len - first) * per_row + (len - last) * per_row + boundaries * per_row;
    MlstmFlops {
        intra,
        state,
        norm: len * (dv + 1),
    }
}

/// Detailed count for one head with key width `dqk` and value width `dv`.
pub fn mlstm_breakdown(len: usize, dqk: usize, dv: usize, mode: KernelMode) -> Result<MlstmFlops> {
    if len == 0 || dqk == 0 || dv == 0 {
        return Err(VilError::config(format!(
            "mLSTM count needs positive sizes, got L={len}, d_qk={dqk}, d_v={dv}"
        )));
    }
    let c = match mode {
        KernelMode::Parallel => len,
        KernelMode::Recurrent => 1,
        KernelMode::Chunkwise(c) if (1..=len).contains(&c) => c,
        KernelMode::Chunkwise(c) => {
            return Err(VilError::config(format!("chunk size {c} outside 1..={len}")));
        }
    };
    Ok(chunked(len as u64, &chunk_lengths(len, c), dqk as u64, dv as u64))
}

/// MACs of one mLSTM head over a sequence of `len` tokens.
///
/// Parallel form: `L²/2·(d_qk+d_v)` for the masked score and value products
/// plus `L·(d_v+1)` normalisation. The chunkwise form applies the same
/// count inside every chunk and adds the state terms between chunks, so it
/// equals the parallel count at `C = L`; the recurrent form is defined as
/// the `C = 1` case.
pub fn flops_mlstm(len: usize, dqk: usize, dv: usize, mode: KernelMode) -> Result<u64> {
    mlstm_breakdown(len, dqk, dv, mode).map(|b| b.total())
}

/// `(C, count)` for every chunk size `1..=len`.
pub fn chunk_sweep(len: usize, dqk: usize, dv: usize) -> Result<Vec<(usize, u64)>> {
    (1..=len)
        .map(|c| Ok((c, flops_mlstm(len, dqk, dv, KernelMode::Chunkwise(c))?)))
        .collect()
}

/// Chunk size with the smallest count (the smallest such `C` on ties).
pub fn optimal_chunk(len: usize, dqk: usize, dv: usize) -> Result<(usize, u64)> {
    let sweep = chunk_sweep(len, dqk, dv)?;
    Ok(sweep.into_iter().min_by_key(|&(c, n)| (n, c)).expect("len >= 1"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub name: String,
    pub count: u64,
    /// Part of a residual block (removed when the block is dropped).
    pub in_block: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub components: Vec<Component>,
    /// Total MACs of each block.
    pub per_block: Vec<u64>,
    pub total: u64,
    pub mode: KernelMode,
    /// Sequence length seen by the blocks.
    pub len: usize,
    pub dim: usize,
    pub resolution: usize,
    pub drop_schedule: DropSchedule,
}

impl FlopsReport {
    pub fn component(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.count)
    }

    pub fn block_total(&self) -> u64 {
        self.per_block.iter().sum()
    }

    /// Rows `component,count` with a header and a closing total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,count\n");
        for c in &self.components {
            s.push_str(&format!("{},{}\n", c.name, c.count));
        }
        s.push_str(&format!("total,{}\n", self.total));
        s
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "resolution {} | L={} D={} | mode {}",
            self.resolution,
            self.len,
            self.dim,
            self.mode.label()
        )?;
        for c in &self.components {
            let share = 100.0 * c.count as f64 / self.total.max(1) as f64;
            writeln!(f, "{:<14} {:>16} {:>6.2}%", c.name, c.count, share)?;
        }
        write!(f, "{:<14} {:>16} ({:.3} G)", "total", self.total, self.total as f64 / 1e9)
    }
}

/// Eval-mode MACs of one image at `resolution`, itemised by component.
pub fn estimate_model_flops(cfg: &ViLConfig, resolution: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid_for(resolution)?;
    let np = (gh * gw) as u64;
    let cls = cfg.has_cls();
    let l = np + u64::from(cls);
    let d = cfg.dim as u64;
    let ld = cfg.layer_dims()?;
    let (e, dqk, h) = (ld.inner as u64, ld.d_qk as u64, ld.heads as u64);
    let bias = |n: u64| if cfg.use_bias { n } else { 0 };

    let patch_embed = np * cfg.patch_features() as u64 * d + bias(np * d) + np * d;

    let mode = match cfg.kernel {
        KernelMode::Chunkwise(c) if c > l as usize => KernelMode::Chunkwise(l as usize),
        m => m,
    };
    let core = h * flops_mlstm(l as usize, ld.head_qk(), ld.head_v(), mode)?;

    let projections = 2 * (l * d * e + bias(l * e))
        + 2 * (l * e * ld.qk_block as u64 + bias(l * dqk))
        + 2 * (l * e * h + l * h)
        + l * e * d
        + bias(l * d);
    let conv = match cfg.conv_kind {
        ConvKind::Conv2d => {
            let grid = np * e * 9 + bias(np * e);
            // a cls token only sees the centre tap
            grid + if cls { e + bias(e) } else { 0 }
        }
        ConvKind::Causal1d => l * e * 4 + bias(l * e),
    };
    // layer norm, silu(conv), group norm, skip scale and add, silu(z), gate
    let pointwise = l * d + 6 * l * e;

    let schedule = cfg.schedule()?;
    let mut per_block = Vec::with_capacity(cfg.depth);
    let (mut proj_t, mut conv_t, mut core_t, mut point_t) = (0, 0, 0, 0);
    for dirs in &schedule {
        let n = dirs.len() as u64;
        proj_t += n * projections;
        conv_t += n * conv;
        core_t += n * core;
        // summing branches, then the residual add
        let merge = (n - 1) * l * d + l * d;
        point_t += n * pointwise + merge;
        per_block.push(n * (projections + conv + core + pointwise) + merge);
    }

    let pooling = match cfg.pooling {
        Pooling::Avg => l * d,
        Pooling::BilateralAvg => 2 * d,
        Pooling::MiddlePatch | Pooling::MiddleCls | Pooling::BilateralConcat => 0,
    };
    let classes = cfg.num_classes as u64;
    let head = l * d + pooling + cfg.pooling.feature_dim(cfg.dim) as u64 * classes + bias(classes);

    let components = vec![
        Component {
            name: "patch_embed".into(),
            count: patch_embed,
            in_block: false,
        },
        Component {
            name: "projections".into(),
            count: proj_t,
            in_block: true,
        },
        Component {
            name: "conv".into(),
            count: conv_t,
            in_block: true,
        },
        Component {
            name: "mlstm_core".into(),
            count: core_t,
            in_block: true,
        },
        Component {
            name: "pointwise".into(),
            count: point_t,
            in_block: true,
        },
        Component {
            name: "head".into(),
            count: head,
            in_block: false,
        },
    ];
    let total = components.iter().map(|c| c.count).sum();
    Ok(FlopsReport {
        components,
        per_block,
        total,
        mode,
        len: l as usize,
        dim: cfg.dim,
        resolution,
        drop_schedule: cfg.drop_path_schedule,
    })
}

/// Drop probability of each block for peak rate `rate` under `schedule`.
pub fn block_drop_rates(depth: usize, rate: f64, schedule: DropSchedule) -> Vec<f64> {
    (0..depth)
        .map(|i| match schedule {
            DropSchedule::Linear if depth > 1 => rate * i as f64 / (depth - 1) as f64,
            _ => rate,
        })
        .collect()
}

/// Expected MACs per training forward when dropped blocks are skipped
/// entirely: each block's count is weighted by its survival probability.
pub fn expected_flops_with_droppath(report: &FlopsReport, rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VilError::config(format!("drop-path rate {rate} outside [0, 1)")));
    }
    let fixed = (report.total - report.block_total()) as f64;
    let rates = block_drop_rates(report.per_block.len(), rate, report.drop_schedule);
    let blocks: f64 = report
        .per_block
        .iter()
        .zip(&rates)
        .map(|(&n, &r)| n as f64 * (1.0 - r))
        .sum();
    Ok(fixed + blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;
    use proptest::prelude::*;

    #[test]
    fn degenerate_chunks_match_other_modes() {
        for (l, dqk, dv) in [(1, 1, 1), (7, 3, 5), (196, 48, 96), (64, 32, 32)] {
            let par = flops_mlstm(l, dqk, dv, KernelMode::Parallel).unwrap();
            let rec = flops_mlstm(l, dqk, dv, KernelMode::Recurrent).unwrap();
            assert_eq!(flops_mlstm(l, dqk, dv, KernelMode::Chunkwise(l)).unwrap(), par);
            assert_eq!(flops_mlstm(l, dqk, dv, KernelMode::Chunkwise(1)).unwrap(), rec);
        }
    }

    #[test]
    fn masked_count_is_half_the_dense_product() {
        let b = mlstm_breakdown(196, 192, 192, KernelMode::Parallel).unwrap();
        assert_eq!(2 * b.intra, 196 * 196 * (192 + 192));
        assert_eq!(b.state, 0);
        assert_eq!(b.norm, 196 * 193);
    }

    #[test]
    fn recurrent_closed_form() {
        let (l, dqk, dv) = (10u64, 4u64, 6u64);
        let want = (l * (dqk + dv)).div_ceil(2) + 3 * (l - 1) * (dqk * dv + dqk) + l * (dv + 1);
        assert_eq!(flops_mlstm(10, 4, 6, KernelMode::Recurrent).unwrap(), want);
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        assert!(matches!(flops_mlstm(8, 4, 4, KernelMode::Chunkwise(0)), Err(VilError::Config(_))));
        assert!(matches!(flops_mlstm(8, 4, 4, KernelMode::Chunkwise(9)), Err(VilError::Config(_))));
        assert!(flops_mlstm(0, 4, 4, KernelMode::Parallel).is_err());
    }

    #[test]
    fn chunk_sweep_has_interior_minimum() {
        let (c, n) = optimal_chunk(1024, 96, 96).unwrap();
        let sweep = chunk_sweep(1024, 96, 96).unwrap();
        assert_eq!(sweep.len(), 1024);
        assert!(sweep.iter().all(|&(_, m)| m >= n));
        assert!(c > 1 && c < 1024, "{c}");
    }

    #[test]
    fn chunk_lengths_cover_sequence() {
        assert_eq!(chunk_lengths(10, 4), vec![4, 4, 2]);
        assert_eq!(chunk_lengths(8, 4), vec![4, 4]);
        assert_eq!(chunk_lengths(3, 5), vec![3]);
    }

    proptest! {
        #[test]
        fn monotone_in_length_and_width(l in 1usize..200, d in 1usize..64, c in 1usize..32) {
            for mode in [KernelMode::Parallel, KernelMode::Recurrent] {
                let base = flops_mlstm(l, d, d, mode).unwrap();
                prop_assert!(flops_mlstm(l + 1, d, d, mode).unwrap() >= base);
                prop_assert!(flops_mlstm(l, d + 1, d, mode).unwrap() >= base);
                prop_assert!(flops_mlstm(l, d, d + 1, mode).unwrap() >= base);
            }
            let c = c.min(l);
            let base = flops_mlstm(l, d, d, KernelMode::Chunkwise(c)).unwrap();
            prop_assert!(flops_mlstm(l + 1, d, d, KernelMode::Chunkwise(c)).unwrap() >= base);
            prop_assert!(flops_mlstm(l, d + 1, d, KernelMode::Chunkwise(c)).unwrap() >= base);
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        for p in [Preset::Tiny, Preset::Small, Preset::Base] {
            let r = estimate_model_flops(&ViLConfig::preset(p), 224).unwrap();
            assert_eq!(r.total, r.components.iter().map(|c| c.count).sum::<u64>());
            let in_block: u64 = r.components.iter().filter(|c| c.in_block).map(|c| c.count).sum();
            assert_eq!(in_block, r.block_total());
            assert_eq!(r.per_block.len(), 24);
        }
    }

    #[test]
    fn preset_estimates_are_pinned() {
        let g = |p| estimate_model_flops(&ViLConfig::preset(p), 224).unwrap().total;
        assert_eq!(g(Preset::Tiny), TINY_224);
        assert_eq!(g(Preset::Small), SMALL_224);
        assert_eq!(g(Preset::Base), BASE_224);
    }

    const TINY_224: u64 = 1_403_174_248;
    const SMALL_224: u64 = 4_887_190_120;
    const BASE_224: u64 = 18_097_919_080;

    #[test]
    fn doubling_resolution_scales_core_by_about_sixteen() {
        let cfg = ViLConfig::preset(Preset::Tiny);
        let a = estimate_model_flops(&cfg, 224).unwrap().component("mlstm_core").unwrap();
        let b = estimate_model_flops(&cfg, 448).unwrap().component("mlstm_core").unwrap();
        let ratio = b as f64 / a as f64;
        assert!((ratio - 16.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn droppath_expectation() {
        let mut cfg = ViLConfig::preset(Preset::Tiny);
        let r = estimate_model_flops(&cfg, 224).unwrap();
        assert_eq!(expected_flops_with_droppath(&r, 0.0).unwrap(), r.total as f64);
        assert!(expected_flops_with_droppath(&r, 1.0).is_err());
        cfg.drop_path_schedule = DropSchedule::Constant;
        let r = estimate_model_flops(&cfg, 224).unwrap();
        let half = expected_flops_with_droppath(&r, 0.5).unwrap();
        let want = (r.total - r.block_total()) as f64 + r.block_total() as f64 / 2.0;
        assert!((half - want).abs() < 1.0);
    }

    fn counted(cfg: &ViLConfig) -> u64 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = crate::model::Model::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let img = crate::tensor::Tensor::zeros([cfg.image_size, cfg.image_size, cfg.channels]);
        let mut g = crate::autograd::Graph::new();
        let vars = model.bind(&mut g);
        model.forward(&mut g, &vars, &img, crate::model::ForwardOptions::eval()).unwrap();
        g.macs()
    }

    #[test]
    fn analytic_matches_instrumented_counter() {
        let mut cfgs = vec![ViLConfig::micro(16, 2, 8), ViLConfig::micro(32, 4, 8)];
        let mut c = ViLConfig::micro(16, 3, 5);
        c.image_size = 64;
        c.pooling = Pooling::MiddleCls;
        c.block_design = crate::traversal::BlockDesign::quad(false);
        cfgs.push(c);
        let mut c = ViLConfig::micro(16, 2, 5);
        c.image_size = 48;
        c.pooling = Pooling::Avg;
        c.conv_kind = ConvKind::Causal1d;
        c.use_bias = false;
        c.block_design = crate::traversal::BlockDesign::bi(true);
        cfgs.push(c);
        for cfg in cfgs {
            let est = estimate_model_flops(&cfg, cfg.image_size).unwrap().total;
            let got = counted(&cfg);
            let rel = (est as f64 - got as f64).abs() / got as f64;
            assert!(rel < 0.05, "{est} vs {got}");
            assert!(est <= got);
        }
    }

    #[test]
    fn csv_and_table() {
        let r = estimate_model_flops(&ViLConfig::micro(8, 1, 3), 32).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("component,count\npatch_embed,"));
        assert!(csv.ends_with(&format!("total,{}\n", r.total)));
        assert!(r.to_string().contains("mlstm_core"));
    }
}
