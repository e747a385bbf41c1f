use rand::{Rng, RngCore};

use super::params::{set_prefix, ParamStore};
use super::{ConvKind, DropSchedule, LayerDims, Pooling, ViLConfig};
use crate::autograd::{Graph, Var};
use crate::mlstm::{graph as mgraph, KernelMode, MlstmState};
use crate::tensor::Tensor;
use crate::traversal::{inverse, with_fixed_token, Direction, TraversalPath};
use crate::{Real, Result, VilError};

/// Flattened patches `[L × patch²·channels]` and their grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches<T> {
    pub data: Tensor<T>,
    pub grid: (usize, usize),
}

/// Cuts an `H×W×C` image into patches in row-major token order. Each
/// patch is flattened as (row, column, channel).
pub fn patchify<T: Real>(image: &Tensor<T>, cfg: &ViLConfig) -> Result<Patches<T>> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(VilError::dim(format!("image must be H×W×C, got {s:?}"))),
    };
    if h != w {
        return Err(VilError::config(format!("images must be square, got {h}×{w}")));
    }
    if c != cfg.channels {
        return Err(VilError::dim(format!("image has {c} channels, model expects {}", cfg.channels)));
    }
    let (gh, gw) = cfg.grid_for(h)?;
    let (p, s) = (cfg.patch_size, cfg.stride());
    let px = image.data();
    let mut data = Vec::with_capacity(gh * gw * p * p * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let row = (gy * s + dy) * w + gx * s;
                data.extend_from_slice(&px[row * c..(row + p) * c]);
            }
        }
    }
    Ok(Patches {
        data: Tensor::new([gh * gw, p * p * c], data)?,
        grid: (gh, gw),
    })
}

/// `tokens + pos`; both `L × D`.
pub fn add_positional<T: Real>(g: &mut Graph<T>, tokens: Var, pos: Var) -> Result<Var> {
    if g.shape(tokens) != g.shape(pos) {
        return Err(VilError::dim(format!(
            "positional embedding {:?} does not match tokens {:?}",
            g.shape(pos),
            g.shape(tokens)
        )));
    }
    g.add(tokens, pos)
}

/// Pools `x[L × D]` to a `1 × F` feature row.
pub fn pool<T: Real>(g: &mut Graph<T>, x: Var, mode: Pooling, cls_position: Option<usize>) -> Result<Var> {
    let len = g.shape(x)[0];
    match (mode, cls_position) {
        (Pooling::MiddleCls, None) => return Err(VilError::config("middle_cls pooling needs a cls token")),
        (Pooling::MiddleCls, Some(c)) if c >= len => {
            return Err(VilError::config(format!("cls position {c} outside sequence of {len}")))
        }
        (Pooling::MiddleCls, Some(_)) => {}
        (other, Some(_)) => {
            return Err(VilError::config(format!(
                "{} pooling does not use a cls token",
                other.label()
            )))
        }
        _ => {}
    }
    match mode {
        Pooling::Avg => g.mean_rows(x),
        Pooling::MiddlePatch => g.slice_rows(x, len / 2, len / 2 + 1),
        Pooling::MiddleCls => {
            let c = cls_position.unwrap_or_default();
            g.slice_rows(x, c, c + 1)
        }
        Pooling::BilateralAvg => {
            let first = g.slice_rows(x, 0, 1)?;
            let last = g.slice_rows(x, len - 1, len)?;
            let sum = g.add(first, last)?;
            Ok(g.scale(sum, T::lit(0.5)))
        }
        Pooling::BilateralConcat => {
            let first = g.slice_rows(x, 0, 1)?;
            let last = g.slice_rows(x, len - 1, len)?;
            g.concat_cols(&[first, last])
        }
    }
}

/// Stochastic-depth decision for one residual branch: `None` skips the
/// branch, `Some(s)` runs it and scales its output by `s`.
pub fn drop_path(rate: f64, training: bool, rng: &mut dyn RngCore) -> Result<Option<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VilError::config(format!("drop-path rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(Some(1.0));
    }
    if rng.random::<f64>() < rate {
        Ok(None)
    } else {
        Ok(Some(1.0 / (1.0 - rate)))
    }
}

/// Per-block drop rates for the configured schedule.
pub fn drop_rates(cfg: &ViLConfig) -> Vec<f64> {
    let n = cfg.depth;
    (0..n)
        .map(|i| match cfg.drop_path_schedule {
            DropSchedule::Constant => cfg.drop_path_rate,
            DropSchedule::Linear if n == 1 => cfg.drop_path_rate,
            DropSchedule::Linear => cfg.drop_path_rate * i as f64 / (n - 1) as f64,
        })
        .collect()
}

/// Token order observed around one mLSTM layer: `order_in[t]` is the
/// canonical index of the token fed at position `t`; `order_out` is the
/// order after the inverse permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub block: usize,
    pub direction: Direction,
    pub order_in: Vec<usize>,
    pub order_out: Vec<usize>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub training: bool,
    pub rng: Option<&'a mut dyn RngCore>,
    pub trace: Option<&'a mut Vec<TraceEvent>>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `1 × num_classes`.
    pub logits: Var,
    /// Blocks whose residual branch was skipped.
    pub dropped: Vec<bool>,
}

/// Graph handles of every parameter, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn all(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone)]
struct LayerIdx {
    norm_w: usize,
    norm_b: Option<usize>,
    up_in_w: usize,
    up_in_b: Option<usize>,
    up_z_w: usize,
    up_z_b: Option<usize>,
    conv_w: usize,
    conv_b: Option<usize>,
    q_w: usize,
    q_b: Option<usize>,
    k_w: usize,
    k_b: Option<usize>,
    ig_w: usize,
    ig_b: usize,
    fg_w: usize,
    fg_b: usize,
    skip: usize,
    gn_w: usize,
    gn_b: Option<usize>,
    down_w: usize,
    down_b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Index {
    pe_w: usize,
    pe_b: Option<usize>,
    pos: usize,
    cls: Option<usize>,
    layers: Vec<Vec<LayerIdx>>,
    norm_w: usize,
    norm_b: Option<usize>,
    head_w: usize,
    head_b: Option<usize>,
}

impl Index {
    fn build<T: Real>(cfg: &ViLConfig, store: &ParamStore<T>) -> Result<Self> {
        let find = |n: &str| {
            store
                .index_of(n)
                .ok_or_else(|| VilError::Format(format!("missing parameter {n}")))
        };
        let layers = (0..cfg.depth)
            .map(|b| {
                (0..cfg.block_design.param_sets())
                    .map(|s| {
                        let p = set_prefix(cfg, b, s);
                        let req = |n: &str| find(&format!("{p}.{n}"));
                        let opt = |n: &str| store.index_of(&format!("{p}.{n}"));
                        Ok(LayerIdx {
                            norm_w: req("norm.weight")?,
                            norm_b: opt("norm.bias"),
                            up_in_w: req("up_in.weight")?,
                            up_in_b: opt("up_in.bias"),
                            up_z_w: req("up_z.weight")?,
                            up_z_b: opt("up_z.bias"),
                            conv_w: req("conv.weight")?,
                            conv_b: opt("conv.bias"),
                            q_w: req("q.weight")?,
                            q_b: opt("q.bias"),
                            k_w: req("k.weight")?,
                            k_b: opt("k.bias"),
                            ig_w: req("igate.weight")?,
                            ig_b: req("igate.bias")?,
                            fg_w: req("fgate.weight")?,
                            fg_b: req("fgate.bias")?,
                            skip: req("skip")?,
                            gn_w: req("gnorm.weight")?,
                            gn_b: opt("gnorm.bias"),
                            down_w: req("down.weight")?,
                            down_b: opt("down.bias"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pe_w: find("patch_embed.weight")?,
            pe_b: store.index_of("patch_embed.bias"),
            pos: find("pos_embed")?,
            cls: store.index_of("cls_token"),
            layers,
            norm_w: find("norm.weight")?,
            norm_b: store.index_of("norm.bias"),
            head_w: find("head.weight")?,
            head_b: store.index_of("head.bias"),
        })
    }
}

/// A configured backbone with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ViLConfig,
    params: ParamStore<T>,
    schedule: Vec<Vec<Direction>>,
    rates: Vec<f64>,
    dims: LayerDims,
    index: Index,
}

impl<T: Real> Model<T> {
    pub fn new(config: ViLConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ParamStore::init(&config, rng)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ViLConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let index = Index::build(&config, &params)?;
        Ok(Self {
            schedule: config.schedule()?,
            rates: drop_rates(&config),
            dims: config.layer_dims()?,
            index,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ViLConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn schedule(&self) -> &[Vec<Direction>] {
        &self.schedule
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    /// Same model at another input resolution, with the positional
    /// embedding resampled to the new grid.
    pub fn with_resolution(&self, image_size: usize) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.image_size = image_size;
        let old = self.config.grid()?;
        let new = cfg.grid()?;
        let mut params = self.params.clone();
        let i = self.index.pos;
        let pos = &params.tensors()[i];
        let resized = super::interpolate_positional(pos, old, new)?;
        let mut tensors = params.tensors().to_vec();
        tensors[i] = resized;
        params = ParamStore::from_tensors(&cfg, tensors)?;
        Self::from_params(cfg, params)
    }

    /// Inserts every parameter as a leaf; frozen tensors get no gradient.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars(
            self.params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut t = t.clone();
                    t.requires_grad = !self.params.is_frozen(i);
                    g.leaf(&t)
                })
                .collect(),
        )
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        image: &Tensor<T>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let ix = &self.index;
        let v = |i: usize| vars.get(i);
        let patches = patchify(image, cfg).map_err(|e| e.context("patchify"))?;
        if patches.grid != cfg.grid()? {
            return Err(VilError::config(format!(
                "image grid {:?} differs from the configured {:?}; use with_resolution",
                patches.grid,
                cfg.grid()?
            )));
        }
        let grid = patches.grid;
        let p = g.leaf(&patches.data);
        let mut x = g.matmul(p, v(ix.pe_w))?;
        if let Some(b) = ix.pe_b {
            x = g.add_row(x, v(b))?;
        }
        x = add_positional(g, x, v(ix.pos)).map_err(|e| e.context("positional embedding"))?;
        let cls = cfg.cls_position()?;
        if let (Some(c), Some(ci)) = (cls, ix.cls) {
            let n = grid.0 * grid.1;
            let mut parts = Vec::new();
            if c > 0 {
                parts.push(g.slice_rows(x, 0, c)?);
            }
            parts.push(v(ci));
            if c < n {
                parts.push(g.slice_rows(x, c, n)?);
            }
            x = g.concat_rows(&parts)?;
        }

        let mut dropped = vec![false; cfg.depth];
        for b in 0..cfg.depth {
            let keep = match opts.rng.as_deref_mut() {
                Some(rng) => drop_path(self.rates[b], opts.training, rng)?,
                None if opts.training && self.rates[b] > 0.0 => {
                    return Err(VilError::Usage("training with drop path needs an rng".into()))
                }
                None => Some(1.0),
            };
            let Some(scale) = keep else {
                dropped[b] = true;
                continue;
            };
            let branch = self
                .block_branch(g, vars, x, b, &self.schedule[b], grid, cls, opts.trace.as_deref_mut())
                .map_err(|e| e.context(format!("block {b}")))?;
            let branch = if scale != 1.0 { g.scale(branch, T::lit(scale)) } else { branch };
            x = g.add(x, branch)?;
        }

        let x = g.layer_norm(x, v(ix.norm_w), ix.norm_b.map(v), T::lit(cfg.norm_eps))?;
        let feat = pool(g, x, cfg.pooling, cls).map_err(|e| e.context("pooling"))?;
        let mut logits = g.matmul(feat, v(ix.head_w))?;
        if let Some(b) = ix.head_b {
            logits = g.add_row(logits, v(b))?;
        }
        Ok(ForwardOutput { logits, dropped })
    }

    /// Sum over `dirs` of the permuted mLSTM layer outputs of block `block`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_branch(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        x: Var,
        block: usize,
        dirs: &[Direction],
        grid: (usize, usize),
        cls: Option<usize>,
        mut trace: Option<&mut Vec<TraceEvent>>,
    ) -> Result<Var> {
        let design = &self.config.block_design;
        let mut acc: Option<Var> = None;
        for &dir in dirs {
            let set = if design.param_sets() == 1 {
                0
            } else {
                design.directions.iter().position(|d| *d == dir).unwrap_or(0)
            };
            let path = TraversalPath::new(dir, grid.0, grid.1)?;
            let perm = with_fixed_token(&path.permutation(), cls);
            let inv = inverse(&perm);
            let identity = dir == Direction::RowForward;
            let xp = if identity { x } else { g.permute_rows(x, &perm)? };
            let y = self.layer(g, vars, xp, &self.index.layers[block][set], path.sequence_grid(), cls)?;
            let y = if identity { y } else { g.permute_rows(y, &inv)? };
            if let Some(t) = trace.as_deref_mut() {
                let order_out = inv.iter().map(|&i| perm[i]).collect();
                t.push(TraceEvent {
                    block,
                    direction: dir,
                    order_in: perm,
                    order_out,
                });
            }
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        acc.ok_or_else(|| VilError::config("block without directions"))
    }

    /// Residual branch of parameter set `set` of block `block`, applied to a
    /// sequence already in traversal order.
    #[cfg(test)]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_at(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        x: Var,
        block: usize,
        set: usize,
        seq_grid: (usize, usize),
        cls: Option<usize>,
    ) -> Result<Var> {
        self.layer(g, vars, x, &self.index.layers[block][set], seq_grid, cls)
    }

    /// One mLSTM layer on an already permuted sequence; returns the
    /// residual branch (without the skip connection to `x`).
    fn layer(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        x: Var,
        li: &LayerIdx,
        seq_grid: (usize, usize),
        cls: Option<usize>,
    ) -> Result<Var> {
        let v = |i: usize| vars.get(i);
        let cfg = &self.config;
        let d = self.dims;
        let eps = T::lit(cfg.norm_eps);
        let linear = |g: &mut Graph<T>, x: Var, w: usize, b: Option<usize>| -> Result<Var> {
            let y = g.matmul(x, v(w))?;
            match b {
                Some(b) => g.add_row(y, v(b)),
                None => Ok(y),
            }
        };
        let xn = g.layer_norm(x, v(li.norm_w), li.norm_b.map(v), eps)?;
        let x_in = linear(g, xn, li.up_in_w, li.up_in_b)?;
        let z = linear(g, xn, li.up_z_w, li.up_z_b)?;
        let conv = match cfg.conv_kind {
            ConvKind::Causal1d => g.causal_conv1d(x_in, v(li.conv_w), li.conv_b.map(v))?,
            ConvKind::Conv2d => self.conv_grid(g, x_in, v(li.conv_w), li.conv_b.map(v), seq_grid, cls)?,
        };
        let xc = g.silu(conv);
        let mut q = g.grouped_linear(xc, v(li.q_w))?;
        if let Some(b) = li.q_b {
            q = g.add_row(q, v(b))?;
        }
        let mut k = g.grouped_linear(xc, v(li.k_w))?;
        if let Some(b) = li.k_b {
            k = g.add_row(k, v(b))?;
        }
        let ig = linear(g, xc, li.ig_w, Some(li.ig_b))?;
        let fg = linear(g, xc, li.fg_w, Some(li.fg_b))?;
        let h = self.mlstm(g, q, k, x_in, ig, fg)?;
        let hn = g.group_norm(h, d.heads, v(li.gn_w), li.gn_b.map(v), eps)?;
        let skip = g.mul_row(xc, v(li.skip))?;
        let hs = g.add(hn, skip)?;
        let gate = g.silu(z);
        let out = g.mul(hs, gate)?;
        linear(g, out, li.down_w, li.down_b)
    }

    /// Depthwise 3×3 convolution over the patch tokens laid out on
    /// `seq_grid`; a cls token only sees the centre tap.
    fn conv_grid(
        &self,
        g: &mut Graph<T>,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        (gh, gw): (usize, usize),
        cls: Option<usize>,
    ) -> Result<Var> {
        let e = self.dims.inner;
        let n = gh * gw;
        let patches = match cls {
            None => x,
            Some(c) => {
                let mut parts = Vec::new();
                if c > 0 {
                    parts.push(g.slice_rows(x, 0, c)?);
                }
                if c < n {
                    parts.push(g.slice_rows(x, c + 1, n + 1)?);
                }
                g.concat_rows(&parts)?
            }
        };
        let grid = g.reshape(patches, [gh, gw, e])?;
        let y = g.conv2d_depthwise(grid, kernel, bias)?;
        let y = g.reshape(y, [n, e])?;
        let Some(c) = cls else {
            return Ok(y);
        };
        let taps = g.reshape(kernel, [9, e])?;
        let centre = g.slice_rows(taps, 4, 5)?;
        let tok = g.slice_rows(x, c, c + 1)?;
        let mut tok = g.mul_row(tok, centre)?;
        if let Some(b) = bias {
            tok = g.add_row(tok, b)?;
        }
        let mut parts = Vec::new();
        if c > 0 {
            parts.push(g.slice_rows(y, 0, c)?);
        }
        parts.push(tok);
        if c < n {
            parts.push(g.slice_rows(y, c, n)?);
        }
        g.concat_rows(&parts)
    }

    fn mlstm(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, ig: Var, fg: Var) -> Result<Var> {
        let d = self.dims;
        let mode = self.config.kernel;
        if mode == KernelMode::Parallel {
            return g.mlstm_parallel(q, k, v, ig, fg, d.heads);
        }
        let (dq, dv) = (d.head_qk(), d.head_v());
        let mut heads = Vec::with_capacity(d.heads);
        for h in 0..d.heads {
            let qh = g.slice_cols(q, h * dq, (h + 1) * dq)?;
            let kh = g.slice_cols(k, h * dq, (h + 1) * dq)?;
            let vh = g.slice_cols(v, h * dv, (h + 1) * dv)?;
            let ih = g.slice_cols(ig, h, h + 1)?;
            let fh = g.slice_cols(fg, h, h + 1)?;
            let init = MlstmState::zeros(dq, dv);
            let out = match mode {
                KernelMode::Recurrent => mgraph::recurrent(g, qh, kh, vh, ih, fh, &init)?.0,
                KernelMode::Chunkwise(c) => mgraph::chunkwise(g, qh, kh, vh, ih, fh, c, &init)?.0,
                KernelMode::Parallel => unreachable!("handled above"),
            };
            heads.push(out);
        }
        g.concat_cols(&heads)
    }

    /// Eval-mode logits for one image.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = self.forward(&mut g, &vars, image, ForwardOptions::eval())?;
        Ok(g.value(out.logits).to_vec())
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
