//! Deflating a video network into an image network and inflating it back,
//! checked on a static clip.
//!
//! cargo run --release --example weight_surgery

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unidual::model::{ModelConfig, Network, StageSpec};
use unidual::nn::{BlockKind, Modality, NormKind};
use unidual::surgery::{deflate_weights, inflate_weights, Checkpoint};
use unidual::Tensor;

fn main() -> unidual::Result<()> {
    let cfg = ModelConfig {
        arch: BlockKind::R2P1D,
        height: 8,
        width: 8,
        clip_len: 12,
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 8, 1), StageSpec::new(1, 8, 2)],
        image_head: false,
        norm: NormKind::None,
        ..ModelConfig::default()
    };
    let video = Network::<f64>::build(&cfg)?;
    let image_ckpt = deflate_weights(&Checkpoint::from_network(&video))?;
    let mut image = Network::build(&image_ckpt.config)?;
    let fresh = image_ckpt.apply_partial(&mut image)?;
    println!("deflated to {} ({} tensors left at init: {fresh:?})", image_ckpt.config.arch, fresh.len());

    // On a static clip, interior frames of the video model match the image model.
    let x = Tensor::<f64>::uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let clip = x.inflate_frames(cfg.clip_len)?;
    let last = video.num_units() - 1;
    let a = image.unit_activation(&x, Modality::Image, last)?;
    let b = video.unit_activation(&clip, Modality::Video, last)?;
    let mid = b.frame(b.shape()[1] / 2)?;
    println!("last unit, middle frame: max |image - video| = {:.2e}", a.max_abs_diff(&mid));

    let back = deflate_weights(&inflate_weights(&image_ckpt, 3)?)?;
    let drift = image_ckpt
        .records
        .iter()
        .zip(&back.records)
        .map(|(p, q)| p.value.max_abs_diff(&q.value))
        .fold(0.0, f64::max);
    println!("deflate(inflate(w, t=3)) vs w: max abs diff {drift:.2e}");
    Ok(())
}
