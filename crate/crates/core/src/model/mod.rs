//! The ViL backbone: patch embedding, positional embedding, a stack of
//! mLSTM blocks traversing the token grid in configurable directions,
//! pooling and a linear head.

mod checkpoint;
mod forward;
mod params;
mod posembed;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mlstm::KernelMode;
use crate::traversal::{assign_directions, BlockDesign, Direction};
use crate::{Result, VilError};

pub use checkpoint::{config_digest, load_checkpoint, read_checkpoint, save_checkpoint, CheckpointEntry};
pub use forward::{
    add_positional, drop_path, drop_rates, patchify, pool, ForwardOptions, ForwardOutput, Model, ParamVars,
    Patches, TraceEvent,
};
pub(crate) use forward::argmax;
pub use params::{count_params, layout, ParamSpec, ParamStore};
pub use posembed::interpolate_positional;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    MiddlePatch,
    MiddleCls,
    BilateralAvg,
    BilateralConcat,
}

impl Pooling {
    pub const ALL: [Pooling; 5] = [
        Pooling::Avg,
        Pooling::MiddlePatch,
        Pooling::MiddleCls,
        Pooling::BilateralAvg,
        Pooling::BilateralConcat,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pooling::Avg => "avg",
            Pooling::MiddlePatch => "middle_patch",
            Pooling::MiddleCls => "middle_cls",
            Pooling::BilateralAvg => "bilateral_avg",
            Pooling::BilateralConcat => "bilateral_concat",
        }
    }

    /// Width of the pooled feature for latent width `dim`.
    pub fn feature_dim(self, dim: usize) -> usize {
        if self == Pooling::BilateralConcat {
            2 * dim
        } else {
            dim
        }
    }
}

impl FromStr for Pooling {
    type Err = VilError;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| VilError::config(format!("unknown pooling {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Depthwise causal convolution along the sequence, kernel 4.
    Causal1d,
    /// Depthwise 3×3 convolution on the token grid in the current order.
    Conv2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSchedule {
    /// Block `i` of `n` drops with `rate · i/(n−1)`.
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViLConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Defaults to `patch_size` (non-overlapping patches).
    #[serde(default)]
    pub patch_stride: Option<usize>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_qk_ratio")]
    pub qk_dim_ratio: f64,
    /// Output width of each block of the block-diagonal q/k projections.
    #[serde(default = "default_qk_block")]
    pub qk_block: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub block_design: BlockDesign,
    pub pooling: Pooling,
    #[serde(default = "default_conv")]
    pub conv_kind: ConvKind,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path_rate: f64,
    #[serde(default = "default_drop_schedule")]
    pub drop_path_schedule: DropSchedule,
    #[serde(default = "default_kernel")]
    pub kernel: KernelMode,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_channels() -> usize {
    3
}
fn default_expansion() -> usize {
    2
}
fn default_qk_ratio() -> f64 {
    0.5
}
fn default_qk_block() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_conv() -> ConvKind {
    ConvKind::Conv2d
}
fn default_true() -> bool {
    true
}
fn default_drop_schedule() -> DropSchedule {
    DropSchedule::Linear
}
fn default_kernel() -> KernelMode {
    KernelMode::Parallel
}
fn default_eps() -> f64 {
    1e-6
}

/// Derived widths of one mLSTM layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub dim: usize,
    pub inner: usize,
    pub d_qk: usize,
    pub heads: usize,
    pub qk_groups: usize,
    pub qk_block: usize,
}

impl LayerDims {
    pub fn head_qk(&self) -> usize {
        self.d_qk / self.heads
    }

    pub fn head_v(&self) -> usize {
        self.inner / self.heads
    }
}

impl ViLConfig {
    pub fn preset(p: Preset) -> Self {
        let dim = match p {
            Preset::Tiny => 192,
            Preset::Small => 384,
            Preset::Base => 768,
        };
        Self {
            image_size: 224,
            patch_size: 16,
            patch_stride: None,
            channels: 3,
            dim,
            depth: 24,
            expansion: default_expansion(),
            qk_dim_ratio: default_qk_ratio(),
            qk_block: default_qk_block(),
            heads: default_heads(),
            block_design: BlockDesign::alternating_bi(),
            pooling: Pooling::BilateralConcat,
            conv_kind: ConvKind::Conv2d,
            use_bias: true,
            num_classes: 1000,
            drop_path_rate: match p {
                Preset::Tiny => 0.0,
                Preset::Small => 0.05,
                Preset::Base => 0.2,
            },
            drop_path_schedule: DropSchedule::Linear,
            kernel: KernelMode::Parallel,
            norm_eps: default_eps(),
        }
    }

    /// The smallest configuration used for gradient checks and toy training:
    /// 32×32 images, 16-pixel patches, a 2×2 token grid.
    pub fn micro(dim: usize, depth: usize, num_classes: usize) -> Self {
        Self {
            image_size: 32,
            dim,
            depth,
            num_classes,
            drop_path_rate: 0.0,
            ..Self::preset(Preset::Tiny)
        }
    }

    pub fn stride(&self) -> usize {
        self.patch_stride.unwrap_or(self.patch_size)
    }

    /// Patch-token grid `(rows, cols)` for a square image of `image_size`.
    pub fn grid_for(&self, image_size: usize) -> Result<(usize, usize)> {
        let (p, s) = (self.patch_size, self.stride());
        if p == 0 || s == 0 {
            return Err(VilError::config("patch size and stride must be positive"));
        }
        if image_size < p || (image_size - p) % s != 0 {
            return Err(VilError::config(format!(
                "image size {image_size} is not covered by patch {p} at stride {s}"
            )));
        }
        let n = (image_size - p) / s + 1;
        Ok((n, n))
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        self.grid_for(self.image_size)
    }

    /// Number of patch tokens.
    pub fn num_patches(&self) -> Result<usize> {
        let (h, w) = self.grid()?;
        Ok(h * w)
    }

    pub fn has_cls(&self) -> bool {
        self.pooling == Pooling::MiddleCls
    }

    /// Sequence length seen by the blocks.
    pub fn seq_len(&self) -> Result<usize> {
        Ok(self.num_patches()? + usize::from(self.has_cls()))
    }

    pub fn cls_position(&self) -> Result<Option<usize>> {
        Ok(self.has_cls().then_some(self.num_patches()? / 2))
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn layer_dims(&self) -> Result<LayerDims> {
        let inner = self.expansion * self.dim;
        let d_qk = (inner as f64 * self.qk_dim_ratio).round() as usize;
        if inner == 0 || d_qk == 0 {
            return Err(VilError::config(format!(
                "inner width {inner} and q/k width {d_qk} must be positive"
            )));
        }
        if self.heads == 0 || inner % self.heads != 0 || d_qk % self.heads != 0 {
            return Err(VilError::config(format!(
                "{} heads do not divide inner width {inner} and q/k width {d_qk}",
                self.heads
            )));
        }
        if self.qk_block == 0 || d_qk % self.qk_block != 0 {
            return Err(VilError::config(format!(
                "q/k block {} does not divide q/k width {d_qk}",
                self.qk_block
            )));
        }
        let qk_groups = d_qk / self.qk_block;
        if inner % qk_groups != 0 {
            return Err(VilError::config(format!(
                "{qk_groups} q/k groups do not divide inner width {inner}"
            )));
        }
        Ok(LayerDims {
            dim: self.dim,
            inner,
            d_qk,
            heads: self.heads,
            qk_groups,
            qk_block: self.qk_block,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(VilError::config("dim, depth, channels and num_classes must be positive"));
        }
        self.grid()?;
        self.layer_dims()?;
        self.block_design.validate()?;
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(VilError::config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if let KernelMode::Chunkwise(0) = self.kernel {
            return Err(VilError::config("chunk size must be at least 1"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(VilError::config("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Vec<Vec<Direction>>> {
        assign_directions(&self.block_design, self.depth)
    }
}

#[cfg(test)]
mod tests;
