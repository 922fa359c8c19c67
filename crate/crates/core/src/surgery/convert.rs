use super::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::nn::BlockKind;
use crate::tensor::{Real, Tensor};

const STAT_SUFFIXES: [&str; 3] = ["running_mean", "running_var", "count"];

/// Sums each `C_out×C_in×t` bank over its taps into `C_out×C_in×1`.
pub fn deflate_bank<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[co, ci, t] = w.shape() else {
        return Err(Error::shape("deflate_bank", format!("expected C_out×C_in×t, got {:?}", w.shape())));
    };
    let data = w.data().chunks_exact(t).map(|taps| taps.iter().copied().sum()).collect();
    Tensor::new(vec![co, ci, 1], data)
}

/// Replicates each `C_out×C_in×1` weight into `t` taps of `w/t`.
pub fn inflate_bank<T: Real>(w: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let &[co, ci, 1] = w.shape() else {
        return Err(Error::shape("inflate_bank", format!("expected C_out×C_in×1, got {:?}", w.shape())));
    };
    let scale = T::from_f64(t as f64);
    let data = w.data().iter().flat_map(|&v| std::iter::repeat_n(v / scale, t)).collect();
    Tensor::new(vec![co, ci, t], data)
}

fn is_stat(name: &str) -> bool {
    STAT_SUFFIXES.iter().any(|s| name.ends_with(&format!(".{s}")))
}

/// Registry layout (names and extents) of the network `cfg` describes.
fn layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let net = Network::<f64>::build(cfg)?;
    Ok(net.store().iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect())
}

/// Assembles records for every name of the target layout; `source` maps a
/// target name to a converted tensor or `None` when the checkpoint lacks it.
fn assemble<T: Real>(
    config: ModelConfig,
    mut source: impl FnMut(&str) -> Result<Option<Tensor<T>>>,
) -> Result<Checkpoint<T>> {
    let mut records = Vec::new();
    for (name, shape) in layout(&config)? {
        if let Some(value) = source(&name)? {
            if value.shape() != shape {
                return Err(Error::ExtentMismatch {
                    name,
                    expected: shape,
                    found: value.shape().to_vec(),
                });
            }
            records.push(Record::new(name, value));
        }
    }
    Ok(Checkpoint {
        config,
        records,
        optimizer: None,
    })
}

/// Converts an R(2+1)D checkpoint, or the video branch of a UniDual one, into
/// an R2D checkpoint whose point-wise weights are the tap sums. Spatial banks,
/// shortcuts and norm parameters are copied verbatim; video-pathway running
/// statistics become the single statistics set. The R2D image head comes from
/// the video head when the class counts agree and otherwise from an existing
/// image head; without either it is left out and must be trained afresh.
pub fn deflate_weights<T: Real>(ckpt: &Checkpoint<T>) -> Result<Checkpoint<T>> {
    let src = &ckpt.config;
    if src.arch == BlockKind::R2D {
        return Err(Error::Config("deflation needs an r2p1d or unidual checkpoint, got r2d".into()));
    }
    let cfg = ModelConfig {
        arch: BlockKind::R2D,
        image_head: true,
        video_head: false,
        aux_image_head: false,
        aux_video_head: false,
        share_aux_image_head: false,
        ..src.clone()
    };
    let get = |name: &str| ckpt.record(name).map(|r| r.value.clone());
    let head_from_video = src.video_head && src.video_classes == cfg.image_classes;
    assemble(cfg, |name| {
        if let Some(prefix) = name.strip_suffix(".point.weight") {
            let bank = match src.arch {
                BlockKind::UniDual => format!("{prefix}.video.weight"),
                _ => name.to_string(),
            };
            let w = get(&bank).ok_or(Error::MissingTensor(bank))?;
            return deflate_bank(&w).map(Some);
        }
        if let Some(rest) = name.strip_prefix("head.image.") {
            if head_from_video {
                return Ok(get(&format!("head.video.{rest}")));
            }
            return Ok(get(name));
        }
        if is_stat(name) {
            return Ok(get(&format!("{name}.video")).or_else(|| get(name)));
        }
        Ok(get(name))
    })
}

/// Converts an R2D checkpoint into R(2+1)D with `t`-tap point-wise banks of
/// `w/t`. Every other tensor, heads included, is copied under its own name.
/// The result carries a video head; it is absent from the records unless the
/// source already had one.
pub fn inflate_weights<T: Real>(ckpt: &Checkpoint<T>, t: usize) -> Result<Checkpoint<T>> {
    let src = &ckpt.config;
    if src.arch != BlockKind::R2D {
        return Err(Error::Config(format!("inflation needs an r2d checkpoint, got {}", src.arch)));
    }
    if t == 0 || t.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("inflation needs an odd temporal size, got {t}")));
    }
    let cfg = ModelConfig {
        arch: BlockKind::R2P1D,
        temporal_kernel: t,
        stem_temporal_kernel: t,
        video_head: true,
        ..src.clone()
    };
    let get = |name: &str| ckpt.record(name).map(|r| r.value.clone());
    assemble(cfg, |name| {
        if name.ends_with(".point.weight") {
            let w = get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            return inflate_bank(&w, t).map(Some);
        }
        Ok(get(name))
    })
}
