use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_image, evaluate_video, EvalConfig};
use super::schedule::{Schedule, ScheduleKind};
use super::sgd::Sgd;
use super::step::{train_step, LossWeights, StepOptions, TrainMode, Variant};
use crate::data::{FrameStrategy, MixedStream, SourceSpec};
use crate::error::{Error, Result};
use crate::model::{HeadId, Network};
use crate::nn::Modality;
use crate::surgery::{deflate_weights, inflate_weights, Checkpoint};
use crate::tensor::Real;

pub const CSV_HEADER: &str = "epoch,lr,loss_img,loss_vid,loss_aux_img,loss_aux_vid,top1,top5,clip1,video1,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fixes the loss routing; the CLI also derives architecture and heads from it.
    pub variant: Variant,
    pub epochs: usize,
    /// Examples drawn from the mixed stream per epoch.
    pub epoch_size: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub step_every: f64,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub aux_frame: FrameStrategy,
    /// Seeds the batch stream and the auxiliary frame choice.
    pub seed: u64,
    /// Train only the classification heads.
    pub freeze_trunk: bool,
    pub checkpoint_every_epoch: bool,
    /// Write per-epoch wall time to the `seconds` column; off keeps the CSV
    /// byte-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::UnidualAux,
            epochs: 5,
            epoch_size: 20_000,
            batch_size: 32,
            schedule: ScheduleKind::WarmupCosine,
            base_lr: 0.05,
            warmup_epochs: 1.0,
            step_every: 2.0,
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            aux_frame: FrameStrategy::Random,
            seed: 0,
            freeze_trunk: false,
            checkpoint_every_epoch: false,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn mode(&self) -> TrainMode {
        self.variant.mode()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            kind: self.schedule,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
            step_every: self.step_every,
            decay_factor: self.decay_factor,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.epoch_size / self.batch_size.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.epoch_size == 0 {
            return Err(Error::Config("epochs, epoch_size and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        self.schedule().validate()
    }
}

/// Metrics of one completed epoch; `None` marks quantities the run lacks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub loss_img: Option<f64>,
    pub loss_vid: Option<f64>,
    pub loss_aux_img: Option<f64>,
    pub loss_aux_vid: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub clip1: Option<f64>,
    pub video1: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_line(&self, with_time: bool) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let secs = if with_time { format!("{:.3}", self.seconds) } else { String::new() };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            f(self.loss_img),
            f(self.loss_vid),
            f(self.loss_aux_img),
            f(self.loss_aux_vid),
            f(self.top1),
            f(self.top5),
            f(self.clip1),
            f(self.video1),
            secs
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
}

/// Main-task evaluation sources: the first source of each modality.
pub fn eval_sources(sources: &[SourceSpec]) -> (Option<&SourceSpec>, Option<&SourceSpec>) {
    let first = |m| sources.iter().find(|s| s.modality == m);
    (first(Modality::Image), first(Modality::Video))
}

/// Evaluates whichever main heads the network has against the matching sources.
pub fn evaluate_all<T: Real>(net: &Network<T>, sources: &[SourceSpec], cfg: &EvalConfig, rec: &mut EpochRecord) -> Result<()> {
    let (img, vid) = eval_sources(sources);
    if let (Some(src), true) = (img, net.has_head(HeadId::ImageMain)) {
        let s = evaluate_image(net, src, cfg)?;
        rec.top1 = Some(s.top1);
        rec.top5 = Some(s.top5);
    }
    if let (Some(src), true) = (vid, net.has_head(HeadId::VideoMain)) {
        let s = evaluate_video(net, src, cfg)?;
        rec.clip1 = Some(s.clip1);
        rec.video1 = Some(s.video1);
    }
    Ok(())
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn check_sources(mode: TrainMode, sources: &[SourceSpec]) -> Result<()> {
    if let Some(s) = sources.iter().find(|s| s.weight > 0.0 && !mode.accepts(s.modality)) {
        return Err(Error::Config(format!("{mode:?} training cannot use {} source {}", s.modality, s.source_id)));
    }
    if mode.is_joint() {
        let has = |m| sources.iter().any(|s| s.modality == m && s.weight > 0.0);
        if !(has(Modality::Image) && has(Modality::Video)) {
            return Err(Error::Config(format!("{mode:?} training needs an image and a video source")));
        }
    }
    Ok(())
}

/// Trains `net` for `cfg.epochs` epochs of `cfg.epoch_size` examples drawn
/// from the mixed stream over `sources`, evaluating after every epoch. With
/// `out_dir`, writes `metrics.csv` incrementally and `final.udck` (with the
/// optimizer state) at the end. Single-threaded and deterministic.
pub fn run_training<T: Real>(
    net: &mut Network<T>,
    sources: &[SourceSpec],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<RunMetrics> {
    cfg.validate()?;
    check_sources(cfg.mode(), sources)?;
    let schedule = cfg.schedule();
    let mut stream = MixedStream::new(sources.to_vec(), cfg.batch_size, cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    opt.heads_only = cfg.freeze_trunk;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let steps = cfg.steps_per_epoch();
    let mut metrics = RunMetrics::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rec = EpochRecord {
            epoch: epoch + 1,
            lr: schedule.lr_at(epoch as f64)?,
            ..EpochRecord::default()
        };
        let (mut li, mut lv, mut lai, mut lav) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        for s in 0..steps {
            let global = epoch * steps + s;
            let lr = schedule.lr_at(epoch as f64 + s as f64 / steps as f64)?;
            let batch = stream.next_batch::<T>();
            let opts = StepOptions {
                weights: cfg.loss_weights,
                aux_frame: cfg.aux_frame,
                aux_seed: cfg.seed ^ (global as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            };
            let losses = train_step(net, cfg.mode(), &batch, &mut opt, lr, &opts).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged { step: global, detail },
                other => other,
            })?;
            li.add(losses.image);
            lv.add(losses.video);
            lai.add(losses.aux_image);
            lav.add(losses.aux_video);
        }
        rec.loss_img = li.get();
        rec.loss_vid = lv.get();
        rec.loss_aux_img = lai.get();
        rec.loss_aux_vid = lav.get();
        evaluate_all(net, sources, eval, &mut rec)?;
        rec.seconds = start.elapsed().as_secs_f64();
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", rec.csv_line(cfg.record_time)).and_then(|_| f.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every_epoch) {
            save_with_state(net, &opt, &dir.join(format!("epoch_{}.udck", epoch + 1)))?;
        }
        progress(&rec);
        metrics.epochs.push(rec);
    }
    if let Some(dir) = out_dir {
        save_with_state(net, &opt, &dir.join("final.udck"))?;
    }
    Ok(metrics)
}

fn save_with_state<T: Real>(net: &Network<T>, opt: &Sgd<T>, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_network(net);
    ckpt.optimizer = Some(opt.state_records(net.store()));
    ckpt.save(path)
}

/// Network for finetuning on `task` from a pretrained checkpoint: video
/// checkpoints are deflated for image finetuning, image checkpoints inflated
/// to `t` taps for video finetuning. Every head is dropped and the new task
/// head starts from its fresh initialization. Returns the network and the
/// parameters the checkpoint did not provide.
pub fn finetune_network<T: Real>(source: &Checkpoint<T>, task: Modality, t: usize) -> Result<(Network<T>, Vec<String>)> {
    use crate::nn::BlockKind::*;
    let converted = match (task, source.config.arch) {
        (Modality::Image, R2D) | (Modality::Video, R2P1D) => source.clone(),
        (Modality::Image, _) => deflate_weights(source)?,
        (Modality::Video, R2D) => inflate_weights(source, t)?,
        (Modality::Video, UniDual) => {
            return Err(Error::Config("video finetuning needs an r2d or r2p1d checkpoint".into()));
        }
    };
    let mut cfg = converted.config.clone();
    cfg.image_head = task == Modality::Image;
    cfg.video_head = task == Modality::Video;
    cfg.aux_image_head = false;
    cfg.aux_video_head = false;
    cfg.share_aux_image_head = false;
    let mut net = Network::build(&cfg)?;
    let body = Checkpoint {
        config: cfg,
        records: converted.records.into_iter().filter(|r| !r.name.starts_with("head.")).collect(),
        optimizer: None,
    };
    let missing = body.apply_partial(&mut net)?;
    Ok((net, missing))
}
