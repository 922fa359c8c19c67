use super::network::Network;
use crate::error::{Error, Result};
use crate::nn::Modality;
use crate::tensor::{Real, Tensor};

/// One channel of a unit's point-wise response.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap<T> {
    pub channel: usize,
    /// `L×H×W` feature map.
    pub map: Tensor<T>,
    pub peak: f64,
}

/// The top-k channels of the input's own pathway and the same channels of the
/// opposite pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationReport<T> {
    pub pathway: Modality,
    pub ranked: Vec<ActivationMap<T>>,
    pub dual: Vec<ActivationMap<T>>,
}

fn channel_maps<T: Real>(act: &Tensor<T>) -> Vec<ActivationMap<T>> {
    let s = act.shape();
    let inner = s[1] * s[2] * s[3];
    act.data()
        .chunks_exact(inner)
        .enumerate()
        .map(|(channel, chunk)| ActivationMap {
            channel,
            map: Tensor::new(s[1..].to_vec(), chunk.to_vec()).expect("channel slice"),
            peak: chunk.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// Channels ordered by descending peak, ties by lower index.
pub fn rank_channels(peaks: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| peaks[b].total_cmp(&peaks[a]).then(a.cmp(&b)));
    order
}

/// Ranks the channels of unit `unit` by their maximum activation for one
/// `C×L×H×W` example. Images (L=1) use the image pathway as primary and an
/// inflated copy on the video pathway as dual; clips use the video pathway
/// and the middle frame on the image pathway.
pub fn top_activated_maps<T: Real>(net: &Network<T>, input: &Tensor<T>, unit: usize, k: usize) -> Result<ActivationReport<T>> {
    let cfg = net.config();
    let &[_, l, _, _] = input.shape() else {
        return Err(Error::shape("top_activated_maps", format!("expected C×L×H×W, got {:?}", input.shape())));
    };
    let (pathway, primary_in, dual_in) = if l == 1 {
        (Modality::Image, input.clone(), input.inflate_frames(cfg.clip_len)?)
    } else {
        (Modality::Video, input.clone(), input.frame(l / 2)?)
    };
    let dual_modality = match pathway {
        Modality::Image => Modality::Video,
        Modality::Video => Modality::Image,
    };
    let primary = channel_maps(&net.unit_activation(&primary_in, pathway, unit)?);
    let dual = channel_maps(&net.unit_activation(&dual_in, dual_modality, unit)?);
    if k == 0 || k > primary.len() {
        return Err(Error::InvalidArgument(format!("k={k} must be in 1..={}", primary.len())));
    }
    let peaks: Vec<f64> = primary.iter().map(|m| m.peak).collect();
    let order = &rank_channels(&peaks)[..k];
    Ok(ActivationReport {
        pathway,
        ranked: order.iter().map(|&c| primary[c].clone()).collect(),
        dual: order.iter().map(|&c| dual[c].clone()).collect(),
    })
}
