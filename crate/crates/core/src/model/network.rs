use std::fmt;

use super::config::ModelConfig;
use crate::autograd::{Group, ParamId, ParamStore, PoolAxes, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    block_forward, fan_in_uniform, residual_unit_forward, BlockKind, BlockParams, BlockSpec, ForwardCtx, Modality,
    StatUpdate, UnitParams, UnitSpec,
};
use crate::tensor::{Real, Tensor};

/// Classification heads a network may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadId {
    ImageMain,
    VideoMain,
    /// Image labels from inflated images on the video pathway.
    AuxImage,
    /// Video labels from single frames on the image pathway.
    AuxVideo,
}

impl HeadId {
    pub const ALL: [HeadId; 4] = [HeadId::ImageMain, HeadId::VideoMain, HeadId::AuxImage, HeadId::AuxVideo];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadId::ImageMain => "image_main",
            HeadId::VideoMain => "video_main",
            HeadId::AuxImage => "image_aux_on_video_path",
            HeadId::AuxVideo => "video_aux_on_image_path",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            HeadId::ImageMain => "head.image",
            HeadId::VideoMain => "head.video",
            HeadId::AuxImage => "head.aux_image",
            HeadId::AuxVideo => "head.aux_video",
        }
    }

    fn group(self) -> Group {
        match self {
            HeadId::ImageMain => Group::HeadImage,
            HeadId::VideoMain => Group::HeadVideo,
            HeadId::AuxImage => Group::HeadAuxImage,
            HeadId::AuxVideo => Group::HeadAuxVideo,
        }
    }

    fn enabled(self, cfg: &ModelConfig) -> bool {
        match self {
            HeadId::ImageMain => cfg.image_head,
            HeadId::VideoMain => cfg.video_head,
            HeadId::AuxImage => cfg.aux_image_head,
            HeadId::AuxVideo => cfg.aux_video_head,
        }
    }

    /// Whether this head owns parameters (a shared aux image head does not).
    fn owns_params(self, cfg: &ModelConfig) -> bool {
        self.enabled(cfg) && !(self == HeadId::AuxImage && cfg.share_aux_image_head)
    }

    fn classes(self, cfg: &ModelConfig) -> usize {
        match self {
            HeadId::ImageMain | HeadId::AuxImage => cfg.image_classes,
            HeadId::VideoMain | HeadId::AuxVideo => cfg.video_classes,
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A batch of images (`N×C×1×H×W`) or clips (`N×C×L×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub enum Batch<T> {
    Images(Tensor<T>),
    Clips(Tensor<T>),
}

impl<T: Real> Batch<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            Batch::Images(t) | Batch::Clips(t) => t,
        }
    }

    pub fn len(&self) -> usize {
        self.tensor().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Batch::Images(_) => "image",
            Batch::Clips(_) => "clip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadParams {
    weight: ParamId,
    bias: ParamId,
}

/// How one head consumes one kind of input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InputPrep {
    AsIs,
    Inflate,
    CenterFrame,
}

#[derive(Clone, Copy, Debug)]
struct Route {
    prep: InputPrep,
    modality: Modality,
    pool: PoolAxes,
}

/// Resolved parameter ids for the current registry layout.
#[derive(Clone, Debug)]
struct Plan {
    stem_spec: BlockSpec,
    stem: BlockParams,
    units: Vec<(UnitSpec, UnitParams)>,
    heads: [Option<HeadParams>; 4],
}

impl Plan {
    fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let pp = cfg.per_pathway_stats();
        let stem_spec = cfg.stem_spec();
        let stem = BlockParams::lookup(store, "stem", &stem_spec, pp)?;
        let units = cfg
            .unit_specs()
            .into_iter()
            .zip(cfg.unit_prefixes())
            .map(|(spec, prefix)| Ok((spec, UnitParams::lookup(store, &prefix, &spec, pp)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = [None; 4];
        for (slot, head) in heads.iter_mut().zip(HeadId::ALL) {
            let owner = if head == HeadId::AuxImage && cfg.share_aux_image_head { HeadId::ImageMain } else { head };
            if head.enabled(cfg) {
                let id = |what: &str| {
                    let name = format!("{}.{what}", owner.prefix());
                    store.id(&name).ok_or(Error::UnknownParameter(name))
                };
                *slot = Some(HeadParams {
                    weight: id("weight")?,
                    bias: id("bias")?,
                });
            }
        }
        Ok(Plan {
            stem_spec,
            stem,
            units,
            heads,
        })
    }
}

/// Result of a forward pass through one head.
pub struct HeadOutput<T> {
    pub logits: Var,
    /// Pending running-statistics updates (train mode only).
    pub updates: Vec<StatUpdate<T>>,
}

/// A built network: configuration, parameter registry and resolved layout.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    plan: Plan,
}

/// Momentum of running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

impl<T: Real> Network<T> {
    /// Builds and initializes a network deterministically from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let pp = config.per_pathway_stats();
        let mut store = ParamStore::new();
        BlockParams::register(&mut store, "stem", &config.stem_spec(), pp, seed)?;
        for (spec, prefix) in config.unit_specs().iter().zip(config.unit_prefixes()) {
            UnitParams::register(&mut store, &prefix, spec, pp, seed)?;
        }
        let features = config.feature_channels();
        for head in HeadId::ALL {
            if !head.owns_params(config) {
                continue;
            }
            let k = head.classes(config);
            let name = format!("{}.weight", head.prefix());
            let w = fan_in_uniform(&[k, features], features, 1.0, seed, &name);
            store.register(name, head.group(), true, w)?;
            store.register(format!("{}.bias", head.prefix()), head.group(), true, Tensor::zeros(&[k]))?;
        }
        Self::from_parts(config.clone(), store)
    }

    /// Wraps an existing registry, checking that it holds every parameter the
    /// configuration needs.
    pub fn from_parts(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let plan = Plan::resolve(&config, &store)?;
        Ok(Network { config, store, plan })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore<T>) {
        (self.config, self.store)
    }

    pub fn num_units(&self) -> usize {
        self.plan.units.len()
    }

    pub fn has_head(&self, head: HeadId) -> bool {
        self.plan.heads[head as usize].is_some()
    }

    /// Removes the auxiliary heads; main-head outputs are unchanged.
    pub fn strip_aux_heads(mut self) -> Result<Self> {
        self.store.retain(|p| !p.group.is_aux_head());
        self.config.aux_image_head = false;
        self.config.aux_video_head = false;
        self.plan = Plan::resolve(&self.config, &self.store)?;
        Ok(self)
    }

    fn route(&self, head: HeadId, batch: &Batch<T>) -> Result<Route> {
        use InputPrep::*;
        let arch = self.config.arch;
        let image = |prep| Route {
            prep,
            modality: Modality::Image,
            pool: PoolAxes::SPATIAL,
        };
        let video = |prep| Route {
            prep,
            modality: Modality::Video,
            pool: PoolAxes::SPATIOTEMPORAL,
        };
        let route = match (arch, head, batch) {
            (BlockKind::UniDual | BlockKind::R2D, HeadId::ImageMain, Batch::Images(_)) => Some(image(AsIs)),
            (BlockKind::R2P1D, HeadId::ImageMain, Batch::Images(_)) => Some(video(Inflate)),
            (_, HeadId::VideoMain, Batch::Clips(_)) => Some(video(AsIs)),
            (BlockKind::UniDual, HeadId::AuxImage, Batch::Images(_)) => Some(video(Inflate)),
            (BlockKind::UniDual, HeadId::AuxVideo, Batch::Images(_)) => Some(image(AsIs)),
            (BlockKind::UniDual, HeadId::AuxVideo, Batch::Clips(_)) => Some(image(CenterFrame)),
            _ => None,
        };
        let mismatch = || Error::HeadMismatch {
            head: head.to_string(),
            input: batch.kind().to_string(),
            arch: arch.to_string(),
        };
        let route = route.ok_or_else(mismatch)?;
        if !self.has_head(head) {
            return Err(Error::InvalidArgument(format!("network has no {head} head")));
        }
        self.check_input(batch)?;
        Ok(route)
    }

    fn check_input(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        let (frames, what) = match batch {
            Batch::Images(_) => (1, "image"),
            Batch::Clips(_) => (c.clip_len, "clip"),
        };
        let want = [batch.len(), c.in_channels, frames, c.height, c.width];
        if batch.tensor().shape() != want || batch.is_empty() {
            return Err(Error::shape(
                "forward_pathway",
                format!("{what} batch must be N×{}×{frames}×{}×{}, got {:?}", c.in_channels, c.height, c.width, batch.tensor().shape()),
            ));
        }
        Ok(())
    }

    fn prepare(&self, prep: InputPrep, batch: &Batch<T>) -> Result<Tensor<T>> {
        let x = batch.tensor();
        match prep {
            InputPrep::AsIs => Ok(x.clone()),
            InputPrep::Inflate => x.inflate_frames(self.config.clip_len),
            InputPrep::CenterFrame => x.frame(x.shape()[2] / 2),
        }
    }

    /// Stem plus residual units; returns the final activation and the
    /// point-wise response of unit `capture`, if requested.
    fn trunk(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        tape: &mut Tape<T>,
        x: Var,
        modality: Modality,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let mut h = block_forward(ctx, tape, x, &self.plan.stem_spec, modality, &self.plan.stem)?;
        h = tape.relu(h)?;
        if self.config.stem_max_pool {
            h = tape.max_pool_spatial(h, 3, 2, 1)?;
        }
        let mut captured = None;
        for (i, (spec, params)) in self.plan.units.iter().enumerate() {
            let out = residual_unit_forward(ctx, tape, h, spec, modality, params)?;
            if capture == Some(i) {
                captured = Some(out.pointwise);
            }
            h = out.out;
        }
        Ok((h, captured))
    }

    /// Runs `batch` through the pathway serving `head` and returns `N×K` logits.
    pub fn forward_pathway(&self, tape: &mut Tape<T>, batch: &Batch<T>, head: HeadId, train: bool) -> Result<HeadOutput<T>> {
        let route = self.route(head, batch)?;
        let input = self.prepare(route.prep, batch)?;
        let mut ctx = ForwardCtx::new(&self.store, train);
        let x = tape.input(input);
        let (features, _) = self.trunk(&mut ctx, tape, x, route.modality, None)?;
        let pooled = tape.global_pool(features, route.pool)?;
        let hp = self.plan.heads[head as usize].expect("route checked the head");
        let w = self.store.leaf(tape, hp.weight);
        let b = self.store.leaf(tape, hp.bias);
        let logits = tape.linear(pooled, w, b)?;
        Ok(HeadOutput {
            logits,
            updates: ctx.updates,
        })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &Batch<T>, head: HeadId) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward_pathway(&mut tape, batch, head, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        ForwardCtx::apply_updates(updates, &mut self.store, NORM_MOMENTUM);
    }

    /// Eval-mode point-wise response (`C×L×H×W`) of unit `unit` for one example.
    pub fn unit_activation(&self, input: &Tensor<T>, modality: Modality, unit: usize) -> Result<Tensor<T>> {
        if unit >= self.plan.units.len() {
            return Err(Error::InvalidArgument(format!(
                "unit index {unit} out of range (network has {} units)",
                self.plan.units.len()
            )));
        }
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&self.store, false);
        let x = tape.input(input.clone());
        let (_, captured) = self.trunk(&mut ctx, &mut tape, x, modality, Some(unit))?;
        Ok(tape.value(captured.expect("unit index checked")).clone())
    }
}
