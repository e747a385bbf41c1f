use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvKind, ViLConfig};
use crate::tensor::{numel, Tensor};
use crate::{Real, Result, VilError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Evenly spaced values from `lo` to `hi` inclusive.
    Linspace(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Receives AdamW weight decay.
    pub decay: bool,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        let decay = shape.len() >= 2;
        Self {
            name,
            shape,
            decay,
            init,
        }
    }

    fn no_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Name prefix of parameter set `set` in block `block`.
pub(crate) fn set_prefix(cfg: &ViLConfig, block: usize, set: usize) -> String {
    if cfg.block_design.param_sets() == 1 {
        format!("blocks.{block}.mlstm")
    } else {
        let dir = cfg.block_design.directions[set].short().to_lowercase();
        format!("blocks.{block}.{dir}")
    }
}

/// Every learnable tensor of the model, in a fixed order.
pub fn layout(cfg: &ViLConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.dim;
    let ld = cfg.layer_dims()?;
    let e = ld.inner;
    let small = (2.0 / (5.0 * d as f64)).sqrt();
    let wang = 2.0 / cfg.depth as f64 / (d as f64).sqrt();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        out.push(ParamSpec::new(name, shape, init));
    };

    push("patch_embed.weight".into(), vec![cfg.patch_features(), d], Init::Normal(small));
    if cfg.use_bias {
        push("patch_embed.bias".into(), vec![d], Init::Zeros);
    }
    push("pos_embed".into(), vec![cfg.num_patches()?, d], Init::Normal(0.02));
    if cfg.has_cls() {
        push("cls_token".into(), vec![1, d], Init::Normal(0.02));
    }

    let taps = match cfg.conv_kind {
        ConvKind::Conv2d => 9,
        ConvKind::Causal1d => 4,
    };
    let conv_shape = match cfg.conv_kind {
        ConvKind::Conv2d => vec![3, 3, e],
        ConvKind::Causal1d => vec![4, e],
    };
    let qk_in = e / ld.qk_groups;
    for b in 0..cfg.depth {
        for s in 0..cfg.block_design.param_sets() {
            let p = set_prefix(cfg, b, s);
            let bias = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, n: usize| {
                if cfg.use_bias {
                    push(format!("{p}.{name}.bias"), vec![n], Init::Zeros);
                }
            };
            push(format!("{p}.norm.weight"), vec![d], Init::Ones);
            bias(&mut push, "norm", d);
            push(format!("{p}.up_in.weight"), vec![d, e], Init::Normal(small));
            bias(&mut push, "up_in", e);
            push(format!("{p}.up_z.weight"), vec![d, e], Init::Normal(small));
            bias(&mut push, "up_z", e);
            push(format!("{p}.conv.weight"), conv_shape.clone(), Init::Normal(1.0 / (taps as f64).sqrt()));
            bias(&mut push, "conv", e);
            for qk in ["q", "k"] {
                push(format!("{p}.{qk}.weight"), vec![ld.qk_groups, qk_in, ld.qk_block], Init::Normal(small));
                bias(&mut push, qk, ld.d_qk);
            }
            // Gate biases are unconditional: the forget-gate bias carries the
            // initial memory retention.
            push(format!("{p}.igate.weight"), vec![e, ld.heads], Init::Zeros);
            push(format!("{p}.igate.bias"), vec![ld.heads], Init::Normal(0.1));
            push(format!("{p}.fgate.weight"), vec![e, ld.heads], Init::Zeros);
            push(format!("{p}.fgate.bias"), vec![ld.heads], Init::Linspace(3.0, 6.0));
            push(format!("{p}.skip"), vec![e], Init::Ones);
            push(format!("{p}.gnorm.weight"), vec![e], Init::Ones);
            bias(&mut push, "gnorm", e);
            push(format!("{p}.down.weight"), vec![e, d], Init::Normal(wang));
            bias(&mut push, "down", d);
        }
    }
    push("norm.weight".into(), vec![d], Init::Ones);
    if cfg.use_bias {
        push("norm.bias".into(), vec![d], Init::Zeros);
    }
    push(
        "head.weight".into(),
        vec![cfg.pooling.feature_dim(d), cfg.num_classes],
        Init::Normal(0.02),
    );
    if cfg.use_bias {
        push("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    }
    for spec in &mut out {
        if spec.name == "pos_embed" || spec.name == "cls_token" {
            *spec = spec.clone().no_decay();
        }
    }
    Ok(out)
}

/// Exact number of learnable scalars.
pub fn count_params(cfg: &ViLConfig) -> Result<usize> {
    Ok(layout(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> ParamStore<T> {
    pub fn init(cfg: &ViLConfig, rng: &mut impl Rng) -> Result<Self> {
        let specs = layout(cfg)?;
        let tensors = specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::lit(dist.sample(rng))).collect()
                    }
                    Init::Linspace(lo, hi) => (0..n)
                        .map(|i| {
                            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                            T::lit(lo + (hi - lo) * t)
                        })
                        .collect(),
                };
                Tensor::new(s.shape.clone(), data)
            })
            .collect::<Result<_>>()?;
        let frozen = vec![false; specs.len()];
        Ok(Self {
            specs,
            tensors,
            frozen,
        })
    }

    /// Builds a store from tensors matching `layout(cfg)` in order and shape.
    pub fn from_tensors(cfg: &ViLConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let specs = layout(cfg)?;
        if specs.len() != tensors.len() {
            return Err(VilError::dim(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(VilError::dim(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        let frozen = vec![false; specs.len()];
        Ok(Self {
            specs,
            tensors,
            frozen,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn decay_flags(&self) -> Vec<bool> {
        self.specs.iter().map(|s| s.decay).collect()
    }

    /// Excludes tensor `i` from gradient computation.
    pub fn set_frozen(&mut self, i: usize, frozen: bool) {
        self.frozen[i] = frozen;
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Flattened copy of all parameters in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}
