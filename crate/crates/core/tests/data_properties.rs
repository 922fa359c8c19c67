//! Statistical properties of the synthetic tasks, checked by training small
//! single-frame classifiers.

use unidual::autograd::Tape;
use unidual::data::{gen_motion_clip, gen_shape_image, SourceSpec};
use unidual::model::{Batch, HeadId, ModelConfig, Network, StageSpec};
use unidual::nn::BlockKind;
use unidual::train::Sgd;
use unidual::Tensor;

type Example = (Tensor<f32>, usize);

fn frame_classifier(classes: usize, seed: u64) -> Network<f32> {
    Network::build(&ModelConfig {
        arch: BlockKind::R2D,
        height: 24,
        width: 24,
        stem_channels: 8,
        stages: vec![StageSpec::new(1, 8, 2), StageSpec::new(1, 16, 2), StageSpec::new(1, 32, 2)],
        image_classes: classes,
        image_head: true,
        video_head: false,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn batch_of(examples: &[Example]) -> (Batch<f32>, Vec<usize>) {
    let parts: Vec<&Tensor<f32>> = examples.iter().map(|e| &e.0).collect();
    (Batch::Images(Tensor::stack(&parts).unwrap()), examples.iter().map(|e| e.1).collect())
}

/// Trains on `steps` batches of 32 drawn from `train(i)` and returns accuracy
/// on 400 examples of `test(i)`.
fn fit_and_score(
    classes: usize,
    seed: u64,
    steps: u64,
    train: impl Fn(u64) -> Example,
    test: impl Fn(u64) -> Example,
) -> f64 {
    let mut net = frame_classifier(classes, seed);
    let mut opt = Sgd::new(0.9, 1e-4);
    for s in 0..steps {
        let examples: Vec<Example> = (0..32).map(|i| train(s * 32 + i)).collect();
        let (batch, labels) = batch_of(&examples);
        let mut tape = Tape::new();
        let out = net.forward_pathway(&mut tape, &batch, HeadId::ImageMain, true).unwrap();
        let loss = tape.softmax_xent(out.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        net.store_mut().zero_grads();
        net.store_mut().accumulate(&tape, &grads);
        net.apply_stat_updates(out.updates);
        let lr = 0.05 * (1.0 - s as f64 / steps as f64).max(0.05);
        opt.step(net.store_mut(), lr).unwrap();
    }
    let mut correct = 0;
    let test_set: Vec<Example> = (0..400).map(&test).collect();
    for chunk in test_set.chunks(50) {
        let (batch, labels) = batch_of(chunk);
        let logits = net.logits(&batch, HeadId::ImageMain).unwrap();
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let best = (0..classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += usize::from(best == label);
        }
    }
    correct as f64 / 400.0
}

fn video_source() -> SourceSpec {
    SourceSpec {
        full_len: 8,
        ..SourceSpec::video(1, 3, 24, 24, 8)
    }
}

/// Middle frame of a training clip.
fn center_frame(src: &SourceSpec, seed: u64, i: u64) -> (Tensor<f32>, usize) {
    let clip = gen_motion_clip::<f32>(src, seed, i);
    (clip.pixels.frame(src.clip_len / 2).unwrap(), clip.label)
}

#[test]
fn center_frames_carry_shape_but_not_direction() {
    let src = video_source();
    let d = src.directions;
    let held_out = 7_777;
    for seed in [1u64, 2, 3] {
        let direction = fit_and_score(
            d,
            seed,
            400,
            |i| {
                let (x, l) = center_frame(&src, seed, i);
                (x, l % d)
            },
            |i| {
                let (x, l) = center_frame(&src, held_out, i);
                (x, l % d)
            },
        );
        assert!(direction <= 0.35, "seed {seed}: direction accuracy {direction}");
        // Control: the same classifier and budget do learn the shape component.
        let shape = fit_and_score(
            src.shapes,
            seed,
            400,
            |i| {
                let (x, l) = center_frame(&src, seed, i);
                (x, l / d)
            },
            |i| {
                let (x, l) = center_frame(&src, held_out, i);
                (x, l / d)
            },
        );
        assert!(shape >= 0.8, "seed {seed}: shape accuracy {shape}");
    }
}

#[test]
fn shape_classifier_transfers_from_images_to_video_frames() {
    let img = SourceSpec::image(0, 3, 24, 24);
    let vid = video_source();
    let acc = fit_and_score(
        img.shapes,
        4,
        400,
        |i| {
            let ex = gen_shape_image::<f32>(&img, 4, i);
            (ex.pixels, ex.label)
        },
        |i| {
            let (x, l) = center_frame(&vid, 99, i);
            (x, l / vid.directions)
        },
    );
    assert!(acc >= 0.8, "cross-source shape accuracy {acc}");
}
