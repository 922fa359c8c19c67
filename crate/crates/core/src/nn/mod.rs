//! Block-level composition: R2D, (2+1)D and UniDual blocks, and residual
//! units built from two blocks plus a shortcut.

mod block;
mod init;
mod params;

pub use block::{
    block_forward, norm_forward, pointwise_forward, residual_unit_forward, unidual_block_forward, ForwardCtx,
    StatUpdate, UnitOutput,
};
pub use init::{fan_in_uniform, param_seed};
pub use params::{BlockParams, Branches, NormParams, NormStats, PointwiseParams, RunningStats, ShortcutParams, UnitParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Spatial conv followed by a 1×1 point-wise conv.
    R2D,
    /// Spatial conv followed by a `t×1×1` temporal conv.
    R2P1D,
    /// Shared spatial conv followed by an image (1×1) and a video (`t×1×1`) branch.
    UniDual,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::R2D => "r2d",
            BlockKind::R2P1D => "r2p1d",
            BlockKind::UniDual => "unidual",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r2d" => Ok(BlockKind::R2D),
            "r2p1d" => Ok(BlockKind::R2P1D),
            "unidual" => Ok(BlockKind::UniDual),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Batch,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected none|batch)"))),
        }
    }
}

/// Declarative description of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width after the spatial conv.
    pub mid_channels: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub norm: NormKind,
    pub has_projection_shortcut: bool,
}

impl BlockSpec {
    /// A block with `mid = out`, 3×3 spatial and 3-tap temporal kernels, unit
    /// strides and no normalization.
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            mid_channels: out_channels,
            spatial_kernel: 3,
            temporal_kernel: 3,
            spatial_stride: 1,
            temporal_stride: 1,
            norm: NormKind::None,
            has_projection_shortcut: in_channels != out_channels,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.spatial_stride > 1 || self.temporal_stride > 1
    }

    /// Taps of the point-wise conv on the video pathway (always 1 for R2D).
    pub fn video_taps(&self) -> usize {
        match self.kind {
            BlockKind::R2D => 1,
            _ => self.temporal_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_kernel.is_multiple_of(2) || self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernels must be odd, got d={} t={}",
                self.spatial_kernel, self.temporal_kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.mid_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.spatial_stride == 0 || self.temporal_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.has_projection_shortcut != self.needs_projection() {
            return Err(Error::Config(format!(
                "projection shortcut flag {} inconsistent with {}→{} channels, strides {}/{}",
                self.has_projection_shortcut,
                self.in_channels,
                self.out_channels,
                self.spatial_stride,
                self.temporal_stride
            )));
        }
        Ok(())
    }
}

/// Two stacked blocks; the shortcut follows the first block's projection flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitSpec {
    pub first: BlockSpec,
    pub second: BlockSpec,
}

impl UnitSpec {
    /// Basic unit from `in_channels` to `out_channels` with downsampling in the first block.
    pub fn basic(
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        spatial_stride: usize,
        temporal_stride: usize,
        norm: NormKind,
    ) -> Self {
        let mut first = BlockSpec::new(kind, in_channels, out_channels);
        first.spatial_stride = spatial_stride;
        first.temporal_stride = temporal_stride;
        first.norm = norm;
        first.has_projection_shortcut = first.needs_projection();
        let mut second = BlockSpec::new(kind, out_channels, out_channels);
        second.norm = norm;
        UnitSpec { first, second }
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.second.in_channels != self.first.out_channels || self.second.has_projection_shortcut {
            return Err(Error::Config("second block must keep width and stride".into()));
        }
        if self.first.kind != self.second.kind {
            return Err(Error::Config("blocks of a unit must share a kind".into()));
        }
        Ok(())
    }
}
