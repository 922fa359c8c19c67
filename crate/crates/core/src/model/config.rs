use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockKind, BlockSpec, NormKind, UnitSpec};

/// Residual units sharing one width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub units: usize,
    pub channels: usize,
    /// Applied by the first unit of the stage.
    pub spatial_stride: usize,
    pub temporal_stride: usize,
}

impl StageSpec {
    pub const fn new(units: usize, channels: usize, spatial_stride: usize) -> Self {
        StageSpec {
            units,
            channels,
            spatial_stride,
            temporal_stride: 1,
        }
    }
}

/// Running statistics regime of normalization layers on the shared spatial convs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStatsMode {
    PerPathway,
    Shared,
}

/// Declarative network description. The default is the desk-scale UniDual
/// network with both main heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: BlockKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per clip on the video pathway.
    pub clip_len: usize,
    pub stem_channels: usize,
    pub stem_spatial_kernel: usize,
    pub stem_temporal_kernel: usize,
    pub stem_stride: usize,
    /// 3×3 stride-2 spatial max pool after the stem.
    pub stem_max_pool: bool,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub stages: Vec<StageSpec>,
    pub image_classes: usize,
    pub video_classes: usize,
    pub image_head: bool,
    pub video_head: bool,
    /// Image labels predicted from inflated images on the video pathway.
    pub aux_image_head: bool,
    /// Video labels predicted from single frames on the image pathway.
    pub aux_video_head: bool,
    /// Reuse the main image head for the inflated-image auxiliary loss.
    pub share_aux_image_head: bool,
    pub norm: NormKind,
    pub norm_stats: NormStatsMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: BlockKind::UniDual,
            in_channels: 3,
            height: 32,
            width: 32,
            clip_len: 8,
            stem_channels: 16,
            stem_spatial_kernel: 3,
            stem_temporal_kernel: 3,
            stem_stride: 1,
            stem_max_pool: false,
            spatial_kernel: 3,
            temporal_kernel: 3,
            stages: vec![StageSpec::new(1, 16, 2), StageSpec::new(1, 32, 2), StageSpec::new(1, 64, 2)],
            image_classes: 4,
            video_classes: 16,
            image_head: true,
            video_head: true,
            aux_image_head: false,
            aux_video_head: false,
            share_aux_image_head: false,
            norm: NormKind::Batch,
            norm_stats: NormStatsMode::PerPathway,
            seed: 0,
        }
    }
}

fn out_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (what, k) in [
            ("stem_spatial_kernel", self.stem_spatial_kernel),
            ("stem_temporal_kernel", self.stem_temporal_kernel),
            ("spatial_kernel", self.spatial_kernel),
            ("temporal_kernel", self.temporal_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{what} must be odd, got {k}"));
            }
        }
        for (what, v) in [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("clip_len", self.clip_len),
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
        ] {
            if v == 0 {
                return fail(format!("{what} must be positive"));
            }
        }
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.units == 0 || s.channels == 0 || s.spatial_stride == 0 || s.temporal_stride == 0 {
                return fail(format!("stage {i} needs positive units, channels and strides"));
            }
        }
        if !(self.image_head || self.video_head) {
            return fail("at least one main head is required".into());
        }
        if self.arch == BlockKind::UniDual && !(self.image_head && self.video_head) {
            return fail("unidual networks need both the image and the video head".into());
        }
        if (self.aux_image_head || self.aux_video_head) && self.arch != BlockKind::UniDual {
            return fail(format!("auxiliary heads require the unidual architecture, got {}", self.arch));
        }
        if self.share_aux_image_head && self.aux_image_head && !self.image_head {
            return fail("a shared auxiliary image head needs the main image head".into());
        }
        if (self.image_head || self.aux_image_head) && self.image_classes == 0 {
            return fail("image_classes must be positive".into());
        }
        if (self.video_head || self.aux_video_head) && self.video_classes == 0 {
            return fail("video_classes must be positive".into());
        }
        for spec in self.unit_specs() {
            spec.validate()?;
        }
        Ok(())
    }

    /// The stem as a block of the network's kind.
    pub fn stem_spec(&self) -> BlockSpec {
        let mut s = BlockSpec::new(self.arch, self.in_channels, self.stem_channels);
        s.spatial_kernel = self.stem_spatial_kernel;
        s.temporal_kernel = self.stem_temporal_kernel;
        s.spatial_stride = self.stem_stride;
        s.norm = self.norm;
        s.has_projection_shortcut = s.needs_projection();
        s
    }

    /// Every residual unit in forward order.
    pub fn unit_specs(&self) -> Vec<UnitSpec> {
        let mut width = self.stem_channels;
        let mut out = Vec::new();
        for stage in &self.stages {
            for u in 0..stage.units {
                let (s, st) = if u == 0 { (stage.spatial_stride, stage.temporal_stride) } else { (1, 1) };
                let mut unit = UnitSpec::basic(self.arch, width, stage.channels, s, st, self.norm);
                for b in [&mut unit.first, &mut unit.second] {
                    b.spatial_kernel = self.spatial_kernel;
                    b.temporal_kernel = self.temporal_kernel;
                }
                out.push(unit);
                width = stage.channels;
            }
        }
        out
    }

    /// `stage{s}.unit{u}` prefix of every unit, aligned with [`Self::unit_specs`].
    pub fn unit_prefixes(&self) -> Vec<String> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, stage)| (0..stage.units).map(move |u| format!("stage{}.unit{}", s + 1, u + 1)))
            .collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// Spatial extent `(H, W)` of the final feature map.
    pub fn feature_extent(&self) -> (usize, usize) {
        let mut hw = (out_extent(self.height, self.stem_stride), out_extent(self.width, self.stem_stride));
        if self.stem_max_pool {
            hw = (out_extent(hw.0, 2), out_extent(hw.1, 2));
        }
        for stage in &self.stages {
            hw = (out_extent(hw.0, stage.spatial_stride), out_extent(hw.1, stage.spatial_stride));
        }
        hw
    }

    pub fn per_pathway_stats(&self) -> bool {
        self.norm_stats == NormStatsMode::PerPathway
    }

    pub fn has_aux_heads(&self) -> bool {
        self.aux_image_head || self.aux_video_head
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
