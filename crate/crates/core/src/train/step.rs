use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sgd::Sgd;
use crate::autograd::{Tape, Var};
use crate::data::{aux_frame_index, FrameStrategy, MixedBatch, SubBatch};
use crate::error::{Error, Result};
use crate::model::{Batch, HeadId, ModelConfig, Network};
use crate::nn::{BlockKind, Modality, StatUpdate};
use crate::tensor::{Real, Tensor};

/// Which losses a training step computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SeparateImage,
    SeparateVideo,
    /// Image training of a network initialized from a converted checkpoint.
    FinetuneImage,
    FinetuneVideo,
    /// One trunk, image and video heads.
    Multitask,
    UniDual,
    UniDualAux,
}

impl TrainMode {
    /// Whether examples of `modality` feed this mode.
    pub fn accepts(self, modality: Modality) -> bool {
        match self {
            TrainMode::SeparateImage | TrainMode::FinetuneImage => modality == Modality::Image,
            TrainMode::SeparateVideo | TrainMode::FinetuneVideo => modality == Modality::Video,
            TrainMode::Multitask | TrainMode::UniDual | TrainMode::UniDualAux => true,
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, TrainMode::Multitask | TrainMode::UniDual | TrainMode::UniDualAux)
    }
}

/// The named model variants and the architecture, heads and mode each uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    R2d,
    R2p1d,
    R2dMultitask,
    R2p1dMultitask,
    Unidual,
    UnidualAux,
    FinetuneImage,
    FinetuneVideo,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::R2d,
        Variant::R2p1d,
        Variant::R2dMultitask,
        Variant::R2p1dMultitask,
        Variant::Unidual,
        Variant::UnidualAux,
        Variant::FinetuneImage,
        Variant::FinetuneVideo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::R2d => "r2d",
            Variant::R2p1d => "r2p1d",
            Variant::R2dMultitask => "r2d_multitask",
            Variant::R2p1dMultitask => "r2p1d_multitask",
            Variant::Unidual => "unidual",
            Variant::UnidualAux => "unidual_aux",
            Variant::FinetuneImage => "finetune_image",
            Variant::FinetuneVideo => "finetune_video",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Variant::R2d => TrainMode::SeparateImage,
            Variant::R2p1d => TrainMode::SeparateVideo,
            Variant::R2dMultitask | Variant::R2p1dMultitask => TrainMode::Multitask,
            Variant::Unidual => TrainMode::UniDual,
            Variant::UnidualAux => TrainMode::UniDualAux,
            Variant::FinetuneImage => TrainMode::FinetuneImage,
            Variant::FinetuneVideo => TrainMode::FinetuneVideo,
        }
    }

    /// `base` with the architecture and heads of this variant.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let (arch, image, video, aux) = match self {
            Variant::R2d | Variant::FinetuneImage => (BlockKind::R2D, true, false, false),
            Variant::R2p1d | Variant::FinetuneVideo => (BlockKind::R2P1D, false, true, false),
            Variant::R2dMultitask => (BlockKind::R2D, true, true, false),
            Variant::R2p1dMultitask => (BlockKind::R2P1D, true, true, false),
            Variant::Unidual => (BlockKind::UniDual, true, true, false),
            Variant::UnidualAux => (BlockKind::UniDual, true, true, true),
        };
        ModelConfig {
            arch,
            image_head: image,
            video_head: video,
            aux_image_head: aux,
            aux_video_head: aux,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
            Error::InvalidArgument(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub image: f64,
    pub video: f64,
    pub aux_image: f64,
    pub aux_video: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            image: 1.0,
            video: 1.0,
            aux_image: 1.0,
            aux_video: 1.0,
        }
    }
}

/// Per-term losses of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub image: Option<f64>,
    pub video: Option<f64>,
    pub aux_image: Option<f64>,
    pub aux_video: Option<f64>,
    /// Weighted sum that was differentiated.
    pub total: f64,
}

/// Per-step options that are not part of the mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub aux_frame: FrameStrategy,
    /// Seeds the random auxiliary frame choice.
    pub aux_seed: u64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            weights: LossWeights::default(),
            aux_frame: FrameStrategy::Random,
            aux_seed: 0,
        }
    }
}

/// Frame `frames[n]` of every clip of an `N×C×L×H×W` batch.
fn select_frames<T: Real>(pixels: &Tensor<T>, frames: &[usize]) -> Tensor<T> {
    let s = pixels.shape();
    let (n, c, l, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let mut data = Vec::with_capacity(n * c * hw);
    for (i, &f) in frames.iter().enumerate() {
        for ch in 0..c {
            let off = ((i * c + ch) * l + f) * hw;
            data.extend_from_slice(&pixels.data()[off..off + hw]);
        }
    }
    Tensor::new(vec![n, c, 1, s[3], s[4]], data).expect("frame extents")
}

fn aux_frames(part: &SubBatch<impl Real>, opts: &StepOptions) -> Vec<usize> {
    let l = part.pixels.shape()[2];
    part.indices
        .iter()
        .map(|&i| {
            let seed = opts.aux_seed ^ (part.source_id as u64).wrapping_mul(0xA076_1D64_78BD_642F) ^ i.wrapping_mul(0xE703_7ED1_A0B4_28DB);
            aux_frame_index(l, opts.aux_frame, seed)
        })
        .collect()
}

/// Accumulates one loss term: the count-weighted mean over sub-batches.
#[derive(Default)]
struct Term {
    parts: Vec<(Var, usize)>,
}

impl Term {
    fn push(&mut self, loss: Var, n: usize) {
        self.parts.push((loss, n));
    }

    fn finish<T: Real>(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        if self.parts.is_empty() {
            return Ok(None);
        }
        let n: usize = self.parts.iter().map(|p| p.1).sum();
        let terms: Vec<(Var, T)> = self.parts.iter().map(|&(v, k)| (v, T::from_f64(k as f64 / n as f64))).collect();
        tape.weighted_sum(&terms).map(Some)
    }
}

/// Forward and backward pass for `batch` under `mode`. Gradients are added
/// to the parameters' gradient buffers and train-mode batch statistics are
/// folded into the running estimates; no weights change.
pub fn compute_gradients<T: Real>(
    net: &mut Network<T>,
    mode: TrainMode,
    batch: &MixedBatch<T>,
    opts: &StepOptions,
) -> Result<StepLosses> {
    if let Some(p) = batch.parts.iter().find(|p| !mode.accepts(p.modality)) {
        return Err(Error::InvalidArgument(format!(
            "{mode:?} training cannot consume {} examples from source {}",
            p.modality, p.source_id
        )));
    }
    let mut tape = Tape::new();
    let mut updates: Vec<StatUpdate<T>> = Vec::new();
    let (mut img, mut vid, mut aux_img, mut aux_vid) = (Term::default(), Term::default(), Term::default(), Term::default());
    let aux = mode == TrainMode::UniDualAux;
    for part in &batch.parts {
        let n = part.labels.len();
        let mut run = |tape: &mut Tape<T>, input: Batch<T>, head: HeadId, term: &mut Term| -> Result<()> {
            let out = net.forward_pathway(tape, &input, head, true)?;
            updates.extend(out.updates);
            let loss = tape.softmax_xent(out.logits, &part.labels)?;
            term.push(loss, n);
            Ok(())
        };
        match part.modality {
            Modality::Image => {
                run(&mut tape, Batch::Images(part.pixels.clone()), HeadId::ImageMain, &mut img)?;
                if aux {
                    run(&mut tape, Batch::Images(part.pixels.clone()), HeadId::AuxImage, &mut aux_img)?;
                }
            }
            Modality::Video => {
                run(&mut tape, Batch::Clips(part.pixels.clone()), HeadId::VideoMain, &mut vid)?;
                if aux {
                    let frames = select_frames(&part.pixels, &aux_frames(part, opts));
                    run(&mut tape, Batch::Images(frames), HeadId::AuxVideo, &mut aux_vid)?;
                }
            }
        }
    }
    let w = &opts.weights;
    let mut losses = StepLosses::default();
    let mut terms = Vec::new();
    for (term, weight, slot) in [
        (&img, w.image, &mut losses.image),
        (&vid, w.video, &mut losses.video),
        (&aux_img, w.aux_image, &mut losses.aux_image),
        (&aux_vid, w.aux_video, &mut losses.aux_video),
    ] {
        if let Some(v) = term.finish(&mut tape)? {
            *slot = Some(tape.value(v).item().as_f64());
            terms.push((v, T::from_f64(weight)));
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let total = tape.weighted_sum(&terms)?;
    losses.total = tape.value(total).item().as_f64();
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({:?})", losses)));
    }
    let grads = tape.backward(total)?;
    net.store_mut().accumulate(&tape, &grads);
    net.apply_stat_updates(updates);
    Ok(losses)
}

/// One optimizer step on the summed loss of `batch`.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    mode: TrainMode,
    batch: &MixedBatch<T>,
    opt: &mut Sgd<T>,
    lr: f64,
    opts: &StepOptions,
) -> Result<StepLosses> {
    net.store_mut().zero_grads();
    let losses = compute_gradients(net, mode, batch, opts)?;
    opt.step(net.store_mut(), lr)?;
    Ok(losses)
}
