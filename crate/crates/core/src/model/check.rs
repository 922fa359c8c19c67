use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Batch, HeadId, Network};
use crate::autograd::{grad_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradient check of a whole network: the loss sums cross-entropies of every
/// head present, images feeding image-label heads and clips feeding video-label
/// heads, so every parameter group is reached.
pub fn check_network(net: &Network<f64>, batch: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = net.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let images = Batch::Images(Tensor::uniform(&[batch, cfg.in_channels, 1, cfg.height, cfg.width], 0.0, 1.0, &mut rng));
    let clips = Batch::Clips(Tensor::uniform(
        &[batch, cfg.in_channels, cfg.clip_len, cfg.height, cfg.width],
        0.0,
        1.0,
        &mut rng,
    ));
    let heads: Vec<HeadId> = HeadId::ALL.into_iter().filter(|&h| net.has_head(h)).collect();
    let labels = |classes: usize, h: usize| -> Vec<usize> { (0..batch).map(|i| (i * 7 + h * 3) % classes).collect() };
    let (_, mut store) = net.clone().into_parts();
    grad_check(&mut store, opts, |s, tape| {
        let net = Network::from_parts(cfg.clone(), s.clone())?;
        let mut terms = Vec::new();
        for (h, &head) in heads.iter().enumerate() {
            let (input, classes) = match head {
                HeadId::ImageMain | HeadId::AuxImage => (&images, cfg.image_classes),
                HeadId::VideoMain | HeadId::AuxVideo => (&clips, cfg.video_classes),
            };
            let out = net.forward_pathway(tape, input, head, true)?;
            terms.push((tape.softmax_xent(out.logits, &labels(classes, h))?, 1.0));
        }
        tape.weighted_sum(&terms)
    })
}
