use super::params::{BlockParams, NormParams, PointwiseParams, RunningStats, UnitParams};
use super::{BlockKind, BlockSpec, Modality, UnitSpec};
use crate::autograd::{BatchStats, NormMode, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims5, Real};

/// A batch of statistics waiting to be folded into running estimates.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub stats: RunningStats,
    pub batch: BatchStats<T>,
}

/// Read-only parameters plus the normalization regime of one forward pass.
pub struct ForwardCtx<'a, T> {
    pub store: &'a ParamStore<T>,
    /// Batch statistics (and pending running-stat updates) when true.
    pub train: bool,
    pub eps: f64,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        ForwardCtx {
            store,
            train,
            eps: 1e-5,
            updates: Vec::new(),
        }
    }

    /// Writes the collected batch statistics into `store`.
    pub fn apply_updates(updates: Vec<StatUpdate<T>>, store: &mut ParamStore<T>, momentum: f64) {
        for u in updates {
            u.stats.update(store, &u.batch, momentum);
        }
    }
}

pub fn norm_forward<T: Real>(
    ctx: &mut ForwardCtx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    norm: &NormParams,
    modality: Modality,
) -> Result<Var> {
    let gamma = ctx.store.leaf(tape, norm.gamma);
    let beta = ctx.store.leaf(tape, norm.beta);
    let stats = norm.stats.select(modality);
    if ctx.train {
        let (y, batch) = tape.batch_norm(x, gamma, beta, NormMode::Train, ctx.eps)?;
        if let Some(batch) = batch {
            ctx.updates.push(StatUpdate { stats, batch });
        }
        Ok(y)
    } else {
        if !stats.is_initialized(ctx.store) {
            return Err(Error::UninitializedStats(ctx.store.get(stats.mean).name.clone()));
        }
        let mean = ctx.store.get(stats.mean).value.data();
        let var = ctx.store.get(stats.var).value.data();
        Ok(tape.batch_norm(x, gamma, beta, NormMode::Eval { mean, var }, ctx.eps)?.0)
    }
}

/// Length-preserving point-wise conv with temporal stride.
pub fn pointwise_forward<T: Real>(
    ctx: &ForwardCtx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    bank: &PointwiseParams,
    temporal_stride: usize,
) -> Result<Var> {
    let w = ctx.store.leaf(tape, bank.weight);
    tape.conv_temporal(x, w, None, temporal_stride, (bank.taps - 1) / 2)
}

fn check_modality<T: Real>(tape: &Tape<T>, x: Var, modality: Modality) -> Result<()> {
    let d = Dims5::of("block", tape.shape(x))?;
    if modality == Modality::Image && d.l != 1 {
        return Err(Error::shape("block", format!("image input must have L=1, got L={}", d.l)));
    }
    Ok(())
}

/// Shared spatial conv, norm, ReLU, then the point-wise bank of `modality`.
/// The other bank never enters the tape.
pub fn block_forward<T: Real>(
    ctx: &mut ForwardCtx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    modality: Modality,
    params: &BlockParams,
) -> Result<Var> {
    check_modality(tape, x, modality)?;
    let w = ctx.store.leaf(tape, params.spatial);
    let mut h = tape.conv_spatial(x, w, None, spec.spatial_stride, (spec.spatial_kernel - 1) / 2)?;
    if let Some(norm) = &params.norm {
        h = norm_forward(ctx, tape, h, norm, modality)?;
    }
    h = tape.relu(h)?;
    pointwise_forward(ctx, tape, h, &params.branches.select(modality), spec.temporal_stride)
}

/// [`block_forward`] restricted to UniDual specs.
pub fn unidual_block_forward<T: Real>(
    ctx: &mut ForwardCtx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    modality: Modality,
    params: &BlockParams,
) -> Result<Var> {
    if spec.kind != BlockKind::UniDual {
        return Err(Error::InvalidArgument(format!("expected a unidual block, got {}", spec.kind)));
    }
    block_forward(ctx, tape, x, spec, modality, params)
}

/// Output of a residual unit plus the second block's point-wise response.
#[derive(Clone, Copy, Debug)]
pub struct UnitOutput {
    pub out: Var,
    pub pointwise: Var,
}

/// `relu(shortcut(x) + block2(relu(block1(x))))`.
pub fn residual_unit_forward<T: Real>(
    ctx: &mut ForwardCtx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    spec: &UnitSpec,
    modality: Modality,
    params: &UnitParams,
) -> Result<UnitOutput> {
    let h = block_forward(ctx, tape, x, &spec.first, modality, &params.first)?;
    let h = tape.relu(h)?;
    let pointwise = block_forward(ctx, tape, h, &spec.second, modality, &params.second)?;
    let skip = match &params.shortcut {
        Some(sc) => {
            let w = ctx.store.leaf(tape, sc.weight);
            let p = tape.conv_spatial(x, w, None, spec.first.spatial_stride, 0)?;
            if spec.first.temporal_stride > 1 {
                tape.frame_subsample(p, spec.first.temporal_stride)?
            } else {
                p
            }
        }
        None => x,
    };
    if tape.shape(skip) != tape.shape(pointwise) {
        return Err(Error::shape(
            "residual_unit",
            format!("shortcut {:?} vs residual {:?}", tape.shape(skip), tape.shape(pointwise)),
        ));
    }
    let sum = tape.add(skip, pointwise)?;
    Ok(UnitOutput {
        out: tape.relu(sum)?,
        pointwise,
    })
}
