use super::init::fan_in_uniform;
use super::{BlockKind, BlockSpec, Modality, NormKind, UnitSpec};
use crate::autograd::{BatchStats, Group, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// He-style gain for weights feeding a rectifier.
const CONV_GAIN: f64 = 6.0;

/// Running mean, unbiased running variance and update counter of one norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
    pub count: ParamId,
}

impl RunningStats {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, suffix: &str, channels: usize) -> Result<Self> {
        let mut reg = |what: &str, value: Tensor<T>| store.register(format!("{prefix}.{what}{suffix}"), Group::Shared, false, value);
        Ok(RunningStats {
            mean: reg("running_mean", Tensor::zeros(&[channels]))?,
            var: reg("running_var", Tensor::full(&[channels], T::one()))?,
            count: reg("count", Tensor::zeros(&[1]))?,
        })
    }

    pub fn is_initialized<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.count).value.data()[0] > T::zero()
    }

    /// Folds one batch into the running estimates. The first batch is copied
    /// verbatim; later ones are blended with `momentum`.
    pub fn update<T: Real>(&self, store: &mut ParamStore<T>, batch: &BatchStats<T>, momentum: f64) {
        let first = !self.is_initialized(store);
        let m = if first { T::one() } else { T::from_f64(momentum) };
        let keep = T::one() - m;
        let unbias = if batch.count > 1 {
            T::from_f64(batch.count as f64 / (batch.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in store.get_mut(self.mean).value.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.var).value.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b * unbias;
        }
        store.get_mut(self.count).value.data_mut()[0] += T::one();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    Single(RunningStats),
    /// Separate estimates per pathway over shared affine parameters.
    PerPathway { image: RunningStats, video: RunningStats },
}

impl NormStats {
    pub fn select(&self, modality: Modality) -> RunningStats {
        match (*self, modality) {
            (NormStats::Single(s), _) => s,
            (NormStats::PerPathway { image, .. }, Modality::Image) => image,
            (NormStats::PerPathway { video, .. }, Modality::Video) => video,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: NormStats,
}

impl NormParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, per_pathway: bool) -> Result<Self> {
        let gamma = store.register(format!("{prefix}.gamma"), Group::Shared, true, Tensor::full(&[channels], T::one()))?;
        let beta = store.register(format!("{prefix}.beta"), Group::Shared, true, Tensor::zeros(&[channels]))?;
        let stats = if per_pathway {
            NormStats::PerPathway {
                image: RunningStats::register(store, prefix, ".image", channels)?,
                video: RunningStats::register(store, prefix, ".video", channels)?,
            }
        } else {
            NormStats::Single(RunningStats::register(store, prefix, "", channels)?)
        };
        Ok(NormParams { gamma, beta, stats })
    }
}

/// Point-wise (`C_out×M×t`) filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointwiseParams {
    pub weight: ParamId,
    pub taps: usize,
}

impl PointwiseParams {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: String,
        group: Group,
        spec: &BlockSpec,
        taps: usize,
        seed: u64,
    ) -> Result<Self> {
        let shape = [spec.out_channels, spec.mid_channels, taps];
        let value = fan_in_uniform(&shape, spec.mid_channels * taps, CONV_GAIN, seed, &name);
        Ok(PointwiseParams {
            weight: store.register(name, group, true, value)?,
            taps,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// One bank used by both modalities (R2D and R2P1D).
    Single(PointwiseParams),
    Dual { image: PointwiseParams, video: PointwiseParams },
}

impl Branches {
    pub fn select(&self, modality: Modality) -> PointwiseParams {
        match (*self, modality) {
            (Branches::Single(p), _) => p,
            (Branches::Dual { image, .. }, Modality::Image) => image,
            (Branches::Dual { video, .. }, Modality::Video) => video,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub spatial: ParamId,
    pub norm: Option<NormParams>,
    pub branches: Branches,
}

impl BlockParams {
    /// Registers a block under `prefix`. `per_pathway_stats` only matters for
    /// UniDual blocks; other kinds keep a single statistics set.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &BlockSpec,
        per_pathway_stats: bool,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let name = format!("{prefix}.spatial.weight");
        let d = spec.spatial_kernel;
        let shape = [spec.mid_channels, spec.in_channels, d, d];
        let value = fan_in_uniform(&shape, spec.in_channels * d * d, CONV_GAIN, seed, &name);
        let spatial = store.register(name, Group::Shared, true, value)?;
        let norm = match spec.norm {
            NormKind::None => None,
            NormKind::Batch => Some(NormParams::register(
                store,
                &format!("{prefix}.spatial_norm"),
                spec.mid_channels,
                per_pathway_stats && spec.kind == BlockKind::UniDual,
            )?),
        };
        let branches = match spec.kind {
            BlockKind::R2D => Branches::Single(PointwiseParams::register(
                store,
                format!("{prefix}.point.weight"),
                Group::ImageBranch,
                spec,
                1,
                seed,
            )?),
            BlockKind::R2P1D => Branches::Single(PointwiseParams::register(
                store,
                format!("{prefix}.point.weight"),
                Group::VideoBranch,
                spec,
                spec.temporal_kernel,
                seed,
            )?),
            BlockKind::UniDual => Branches::Dual {
                image: PointwiseParams::register(store, format!("{prefix}.image.weight"), Group::ImageBranch, spec, 1, seed)?,
                video: PointwiseParams::register(
                    store,
                    format!("{prefix}.video.weight"),
                    Group::VideoBranch,
                    spec,
                    spec.temporal_kernel,
                    seed,
                )?,
            },
        };
        Ok(BlockParams { spatial, norm, branches })
    }

    /// Resolves the ids of an already registered block.
    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str, spec: &BlockSpec, per_pathway_stats: bool) -> Result<Self> {
        let id = |name: String| store.id(&name).ok_or(Error::UnknownParameter(name));
        let stats = |suffix: &str| -> Result<RunningStats> {
            Ok(RunningStats {
                mean: id(format!("{prefix}.spatial_norm.running_mean{suffix}"))?,
                var: id(format!("{prefix}.spatial_norm.running_var{suffix}"))?,
                count: id(format!("{prefix}.spatial_norm.count{suffix}"))?,
            })
        };
        let norm = match spec.norm {
            NormKind::None => None,
            NormKind::Batch => Some(NormParams {
                gamma: id(format!("{prefix}.spatial_norm.gamma"))?,
                beta: id(format!("{prefix}.spatial_norm.beta"))?,
                stats: if per_pathway_stats && spec.kind == BlockKind::UniDual {
                    NormStats::PerPathway {
                        image: stats(".image")?,
                        video: stats(".video")?,
                    }
                } else {
                    NormStats::Single(stats("")?)
                },
            }),
        };
        let pw = |name: &str, taps| -> Result<PointwiseParams> {
            Ok(PointwiseParams {
                weight: id(format!("{prefix}.{name}.weight"))?,
                taps,
            })
        };
        let branches = match spec.kind {
            BlockKind::R2D => Branches::Single(pw("point", 1)?),
            BlockKind::R2P1D => Branches::Single(pw("point", spec.temporal_kernel)?),
            BlockKind::UniDual => Branches::Dual {
                image: pw("image", 1)?,
                video: pw("video", spec.temporal_kernel)?,
            },
        };
        Ok(BlockParams {
            spatial: id(format!("{prefix}.spatial.weight"))?,
            norm,
            branches,
        })
    }
}

/// 1×1 spatial projection on the shortcut path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortcutParams {
    pub weight: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitParams {
    pub first: BlockParams,
    pub second: BlockParams,
    pub shortcut: Option<ShortcutParams>,
}

impl UnitParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &UnitSpec,
        per_pathway_stats: bool,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let first = BlockParams::register(store, &format!("{prefix}.block1"), &spec.first, per_pathway_stats, seed)?;
        let second = BlockParams::register(store, &format!("{prefix}.block2"), &spec.second, per_pathway_stats, seed)?;
        let shortcut = if spec.first.has_projection_shortcut {
            let name = format!("{prefix}.shortcut.weight");
            let (cout, cin) = (spec.first.out_channels, spec.first.in_channels);
            let value = fan_in_uniform(&[cout, cin, 1, 1], cin, CONV_GAIN, seed, &name);
            Some(ShortcutParams {
                weight: store.register(name, Group::Shared, true, value)?,
            })
        } else {
            None
        };
        Ok(UnitParams { first, second, shortcut })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str, spec: &UnitSpec, per_pathway_stats: bool) -> Result<Self> {
        let first = BlockParams::lookup(store, &format!("{prefix}.block1"), &spec.first, per_pathway_stats)?;
        let second = BlockParams::lookup(store, &format!("{prefix}.block2"), &spec.second, per_pathway_stats)?;
        let shortcut = if spec.first.has_projection_shortcut {
            let name = format!("{prefix}.shortcut.weight");
            Some(ShortcutParams {
                weight: store.id(&name).ok_or(Error::UnknownParameter(name))?,
            })
        } else {
            None
        };
        Ok(UnitParams { first, second, shortcut })
    }
}
