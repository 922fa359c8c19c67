use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{gen_full_video, gen_shape_image, SourceSpec};
use crate::error::{Error, Result};
use crate::model::{Batch, HeadId, Network};
use crate::nn::Modality;
use crate::tensor::{Real, Tensor};

/// How per-clip scores are combined into a video prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAveraging {
    #[default]
    Softmax,
    Logits,
}

impl FromStr for ScoreAveraging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ScoreAveraging::Softmax),
            "logits" => Ok(ScoreAveraging::Logits),
            _ => Err(Error::InvalidArgument(format!("averaging must be softmax or logits, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out full videos per evaluation.
    pub videos: usize,
    /// Held-out images per evaluation.
    pub images: usize,
    /// Clips per video, start offsets evenly spaced over `[0, T−L]`.
    pub clips: usize,
    /// Seed of the held-out examples; keep it apart from the training seed.
    pub seed: u64,
    pub averaging: ScoreAveraging,
    /// Examples per forward pass.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            videos: 100,
            images: 400,
            clips: 10,
            seed: 1_000_003,
            averaging: ScoreAveraging::Softmax,
            batch: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoScores {
    pub clip1: f64,
    pub video1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub top1: f64,
    pub top5: f64,
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` best scores, ties ranked by lower index.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let y = row[label];
    let rank = row.iter().enumerate().filter(|&(j, &v)| v > y || (v == y && j < label)).count();
    rank < k
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Start frames of `clips` clips of length `l` spread over `t` frames.
pub fn clip_offsets(t: usize, l: usize, clips: usize) -> Vec<usize> {
    let span = t - l;
    if clips == 1 {
        return vec![span / 2];
    }
    (0..clips).map(|j| ((j * span) as f64 / (clips - 1) as f64).round() as usize).collect()
}

fn rows<T: Real>(scores: &Tensor<T>, n: usize) -> Result<Vec<Vec<f64>>> {
    let &[rows, k] = scores.shape() else {
        return Err(Error::shape("evaluate", format!("scores must be N×K, got {:?}", scores.shape())));
    };
    if rows != n {
        return Err(Error::shape("evaluate", format!("{rows} score rows for {n} inputs")));
    }
    Ok(scores.data().chunks_exact(k).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
}

/// Clip- and video-level accuracy of `score` on held-out full videos of
/// `source`. `score` maps a clip batch to `N×K` scores; batches hold whole
/// videos in index order with their clips in offset order.
pub fn score_videos<T: Real>(
    source: &SourceSpec,
    cfg: &EvalConfig,
    mut score: impl FnMut(&Batch<T>) -> Result<Tensor<T>>,
) -> Result<VideoScores> {
    if source.modality != Modality::Video {
        return Err(Error::InvalidArgument(format!("source {} is not a video source", source.source_id)));
    }
    let (t, l) = (source.full_len, source.clip_len);
    if t < l {
        return Err(Error::InvalidArgument(format!("full videos of {t} frames are shorter than clips of {l}")));
    }
    if cfg.clips == 0 || cfg.videos == 0 {
        return Err(Error::InvalidArgument("need at least one video and one clip".into()));
    }
    let offsets = clip_offsets(t, l, cfg.clips);
    let per_batch = (cfg.batch / cfg.clips).max(1);
    let [c, _, h, w] = source.example_shape();
    let plane = h * w;
    let (mut clip_hits, mut video_hits) = (0usize, 0usize);
    for first in (0..cfg.videos).step_by(per_batch) {
        let ids: Vec<u64> = (first..cfg.videos.min(first + per_batch)).map(|i| i as u64).collect();
        let mut data = Vec::with_capacity(ids.len() * cfg.clips * c * l * plane);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in &ids {
            let v = gen_full_video::<T>(source, cfg.seed, i);
            labels.push(v.label);
            for &o in &offsets {
                for ch in 0..c {
                    let start = (ch * t + o) * plane;
                    data.extend_from_slice(&v.pixels.data()[start..start + l * plane]);
                }
            }
        }
        let n = ids.len() * cfg.clips;
        let batch = Batch::Clips(Tensor::new(vec![n, c, l, h, w], data)?);
        let scores = rows(&score(&batch)?, n)?;
        for (video, &label) in scores.chunks_exact(cfg.clips).zip(&labels) {
            let k = video[0].len();
            let mut mean = vec![0.0; k];
            for row in video {
                clip_hits += usize::from(argmax(row) == label);
                let s = match cfg.averaging {
                    ScoreAveraging::Softmax => softmax(row),
                    ScoreAveraging::Logits => row.clone(),
                };
                mean.iter_mut().zip(&s).for_each(|(m, v)| *m += v / cfg.clips as f64);
            }
            video_hits += usize::from(argmax(&mean) == label);
        }
    }
    Ok(VideoScores {
        clip1: clip_hits as f64 / (cfg.videos * cfg.clips) as f64,
        video1: video_hits as f64 / cfg.videos as f64,
    })
}

/// Top-1 and top-`min(5, K)` accuracy of `score` on held-out images.
pub fn score_images<T: Real>(
    source: &SourceSpec,
    cfg: &EvalConfig,
    mut score: impl FnMut(&Batch<T>) -> Result<Tensor<T>>,
) -> Result<ImageScores> {
    if source.modality != Modality::Image {
        return Err(Error::InvalidArgument(format!("source {} is not an image source", source.source_id)));
    }
    if cfg.images == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    let [c, _, h, w] = source.example_shape();
    let per_batch = cfg.batch.max(1);
    let (mut top1, mut top5) = (0usize, 0usize);
    for first in (0..cfg.images).step_by(per_batch) {
        let ids: Vec<u64> = (first..cfg.images.min(first + per_batch)).map(|i| i as u64).collect();
        let mut data = Vec::with_capacity(ids.len() * c * h * w);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in &ids {
            let e = gen_shape_image::<T>(source, cfg.seed, i);
            labels.push(e.label);
            data.extend(e.pixels.into_data());
        }
        let batch = Batch::Images(Tensor::new(vec![ids.len(), c, 1, h, w], data)?);
        for (row, &label) in rows(&score(&batch)?, ids.len())?.iter().zip(&labels) {
            top1 += usize::from(argmax(row) == label);
            top5 += usize::from(in_top_k(row, label, row.len().min(5)));
        }
    }
    Ok(ImageScores {
        top1: top1 as f64 / cfg.images as f64,
        top5: top5 as f64 / cfg.images as f64,
    })
}

/// clip@1 and video@1 of the network's video head (eval-mode statistics).
pub fn evaluate_video<T: Real>(net: &Network<T>, source: &SourceSpec, cfg: &EvalConfig) -> Result<VideoScores> {
    score_videos(source, cfg, |b| net.logits(b, HeadId::VideoMain))
}

/// top-1 and top-5 of the network's image head (eval-mode statistics).
pub fn evaluate_image<T: Real>(net: &Network<T>, source: &SourceSpec, cfg: &EvalConfig) -> Result<ImageScores> {
    score_images(source, cfg, |b| net.logits(b, HeadId::ImageMain))
}
