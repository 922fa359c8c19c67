use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::model::{Batch, HeadId, ModelConfig, Network, StageSpec};
use crate::nn::{BlockKind, Modality, NormKind};
use crate::tensor::Tensor;

/// Three stages, long clips so interior frames survive seven temporal convs.
fn deep(arch: BlockKind) -> ModelConfig {
    ModelConfig {
        arch,
        height: 8,
        width: 8,
        clip_len: 20,
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1), StageSpec::new(1, 8, 2), StageSpec::new(1, 8, 2)],
        image_classes: 4,
        video_classes: 6,
        image_head: arch != BlockKind::R2P1D,
        video_head: arch != BlockKind::R2D,
        norm: NormKind::None,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[cfg.in_channels, 1, cfg.height, cfg.width], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Temporal convolutions between the input and the output of `unit`.
fn depth(unit: usize) -> usize {
    1 + 2 * (unit + 1)
}

/// Largest difference between a single-frame activation and the interior
/// frames of a clip activation.
fn interior_gap(img_act: &Tensor<f64>, clip_act: &Tensor<f64>, margin: usize) -> f64 {
    let s = clip_act.shape();
    let (c, l, hw) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(img_act.shape(), &[c, 1, s[2], s[3]]);
    assert!(2 * margin < l, "no interior frames left");
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        let plane = &img_act.data()[ch * hw..(ch + 1) * hw];
        for f in margin..l - margin {
            let off = (ch * l + f) * hw;
            for (a, b) in plane.iter().zip(&clip_act.data()[off..off + hw]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn check_equivalence(video: &Network<f64>, image_net: &Network<f64>, seed: u64) {
    let x = image(video.config(), seed);
    let clip = x.inflate_frames(video.config().clip_len).unwrap();
    for unit in 0..video.num_units() {
        let a = image_net.unit_activation(&x, Modality::Image, unit).unwrap();
        let b = video.unit_activation(&clip, Modality::Video, unit).unwrap();
        let gap = interior_gap(&a, &b, depth(unit));
        assert!(gap <= 1e-12, "unit {unit}: gap {gap:e}");
    }
}

#[test]
fn tap_sums_and_replication() {
    let w = Tensor::<f64>::from_f64(&[1, 1, 3], &[0.2, 0.5, 0.3]).unwrap();
    let d = deflate_bank(&w).unwrap();
    assert_eq!(d.shape(), &[1, 1, 1]);
    assert!((d.data()[0] - 1.0).abs() < 1e-15);
    let i = inflate_bank(&Tensor::<f64>::from_f64(&[1, 1, 1], &[0.6]).unwrap(), 3).unwrap();
    for v in i.data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
    let bank = Tensor::<f64>::zeros(&[16, 8, 3]);
    assert_eq!(deflate_bank(&bank).unwrap().shape(), &[16, 8, 1]);
}

#[test]
fn deflated_r2p1d_matches_video_model_on_static_clips() {
    let video = Network::<f64>::build(&deep(BlockKind::R2P1D)).unwrap();
    let d = deflate_weights(&Checkpoint::from_network(&video)).unwrap();
    assert_eq!(d.config.arch, BlockKind::R2D);
    let mut image_net = Network::build(&d.config).unwrap();
    let missing = d.apply_partial(&mut image_net).unwrap();
    // 6 video classes never become a 4-class image head.
    assert_eq!(missing, ["head.image.weight", "head.image.bias"]);
    check_equivalence(&video, &image_net, 1);
}

#[test]
fn deflated_unidual_video_branch_matches_video_pathway() {
    let cfg = ModelConfig {
        video_classes: 4,
        aux_image_head: true,
        aux_video_head: true,
        ..deep(BlockKind::UniDual)
    };
    let net = Network::<f64>::build(&cfg).unwrap();
    let d = deflate_weights(&Checkpoint::from_network(&net)).unwrap();
    let image_net = d.to_network().unwrap();
    // Equal class counts carry the video head over.
    assert_eq!(
        image_net.store().by_name("head.image.weight").unwrap().value,
        net.store().by_name("head.video.weight").unwrap().value
    );
    check_equivalence(&net, &image_net, 2);
}

#[test]
fn inflated_r2d_matches_source_on_static_clips() {
    let src = Network::<f64>::build(&deep(BlockKind::R2D)).unwrap();
    let inf = inflate_weights(&Checkpoint::from_network(&src), 3).unwrap();
    assert_eq!(inf.config.arch, BlockKind::R2P1D);
    let mut video = Network::build(&inf.config).unwrap();
    let missing = inf.apply_partial(&mut video).unwrap();
    assert_eq!(missing, ["head.video.weight", "head.video.bias"]);
    check_equivalence(&video, &src, 3);
}

#[test]
fn inflated_model_reproduces_image_logits_through_its_image_head() {
    // One frame, temporal kernel 1 leaves no boundary: the whole output matches.
    let cfg = ModelConfig {
        clip_len: 1,
        ..deep(BlockKind::R2D)
    };
    let src = Network::<f64>::build(&cfg).unwrap();
    let inf = inflate_weights(&Checkpoint::from_network(&src), 1).unwrap();
    let mut video = Network::build(&inf.config).unwrap();
    inf.apply_partial(&mut video).unwrap();
    let x = Batch::Images(image(&cfg, 4).reshape(&[1, 3, 1, 8, 8]).unwrap());
    let a = src.logits(&x, HeadId::ImageMain).unwrap();
    let b = video.logits(&x, HeadId::ImageMain).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn deflate_after_inflate_is_identity() {
    let src = Network::<f64>::build(&deep(BlockKind::R2D)).unwrap();
    let c = Checkpoint::from_network(&src);
    for t in [1, 3, 5, 7] {
        let back = deflate_weights(&inflate_weights(&c, t).unwrap()).unwrap();
        // Temporal kernel sizes are inert on R2D networks and keep the inflated value.
        let expected = ModelConfig {
            temporal_kernel: t,
            stem_temporal_kernel: t,
            ..c.config.clone()
        };
        assert_eq!(back.config, expected);
        assert_eq!(back.records.len(), c.records.len());
        for (a, b) in c.records.iter().zip(&back.records) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() <= 1e-15 * x.abs(), "{}: {x} vs {y}", a.name);
            }
        }
    }
}

#[test]
fn deflation_preserves_spatial_counts_and_divides_temporal_counts() {
    let video = Network::<f64>::build(&deep(BlockKind::R2P1D)).unwrap();
    let c = Checkpoint::from_network(&video);
    let d = deflate_weights(&c).unwrap();
    for r in &d.records {
        let src = c.record(&r.name).unwrap();
        if r.name.ends_with(".point.weight") {
            assert_eq!(src.value.numel(), 3 * r.value.numel());
        } else {
            assert_eq!(src.value, r.value);
        }
    }
}

#[test]
fn conversion_errors() {
    let r2d = Checkpoint::from_network(&Network::<f64>::build(&deep(BlockKind::R2D)).unwrap());
    assert!(matches!(inflate_weights(&r2d, 2), Err(Error::InvalidArgument(_))));
    assert!(matches!(deflate_weights(&r2d), Err(Error::Config(_))));
    let mut video = Checkpoint::from_network(&Network::<f64>::build(&deep(BlockKind::R2P1D)).unwrap());
    assert!(matches!(inflate_weights(&video, 3), Err(Error::Config(_))));
    video.records.retain(|r| r.name != "stage2.unit1.block1.point.weight");
    match deflate_weights(&video) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, "stage2.unit1.block1.point.weight"),
        other => panic!("{other:?}"),
    }
}

fn bn_net() -> Network<f32> {
    let cfg = ModelConfig {
        norm: NormKind::Batch,
        aux_image_head: true,
        ..deep(BlockKind::UniDual)
    };
    Network::build(&cfg).unwrap()
}

#[test]
fn round_trip_is_bitwise_and_bytes_are_deterministic() {
    let net = bn_net();
    let c = Checkpoint::from_network(&net);
    let bytes = c.to_bytes();
    assert_eq!(bytes, Checkpoint::from_network(&bn_net()).to_bytes());
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes(), bytes);
    let restored = back.to_network().unwrap();
    for ((_, a), (_, b)) in net.store().iter().zip(restored.store().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(restored.config(), net.config());
}

#[test]
fn file_round_trip_and_optimizer_section() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.udck");
    let net = Network::<f64>::build(&deep(BlockKind::R2D)).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let loaded: Network<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(Checkpoint::from_network(&loaded), Checkpoint::from_network(&net));

    let mut c = Checkpoint::from_network(&net);
    c.optimizer = Some(vec![Record::new("stem.spatial.weight", Tensor::full(&[2], 0.5))]);
    assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    // Payloads written at 64 bits load into 32-bit networks.
    let narrow = Checkpoint::<f32>::from_bytes(&Checkpoint::from_network(&net).to_bytes()).unwrap();
    assert_eq!(narrow.records[0].value.data()[0], net.store().iter().next().unwrap().1.value.data()[0] as f32);
}

/// Byte offset of the first payload value of record `name`.
fn payload_offset(bytes: &[u8], c: &Checkpoint<f64>, name: &str) -> (usize, usize) {
    let mut pos = 4 + 4 + 1 + 4 + c.config.to_toml().len() + 4;
    for r in &c.records {
        let header = 4 + r.name.len() + 1 + 8 * r.value.rank() + 8;
        if r.name == name {
            return (pos + header - 8, pos + header);
        }
        pos += header + 8 * r.value.numel();
    }
    let _ = bytes;
    panic!("no record {name}");
}

#[test]
fn robustness_errors_name_the_record() {
    let net = Network::<f64>::build(&deep(BlockKind::R2D)).unwrap();
    let c = Checkpoint::from_network(&net);
    let bytes = c.to_bytes();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));

    // Declared count disagrees with the extents.
    let name = "stage1.unit1.block1.spatial.weight";
    let (count_at, _) = payload_offset(&bytes, &c, name);
    let mut bad = bytes.clone();
    let n = c.record(name).unwrap().value.numel() as u64;
    bad[count_at..count_at + 8].copy_from_slice(&(n - 1).to_le_bytes());
    match Checkpoint::<f64>::from_bytes(&bad) {
        Err(Error::CorruptRecord { name: got, .. }) => assert_eq!(got, name),
        other => panic!("{other:?}"),
    }

    // Truncation inside a payload.
    let (_, data_at) = payload_offset(&bytes, &c, name);
    match Checkpoint::<f64>::from_bytes(&bytes[..data_at + 5]) {
        Err(Error::CorruptRecord { name: got, detail }) => {
            assert_eq!(got, name);
            assert!(detail.contains("payload"));
        }
        other => panic!("{other:?}"),
    }

    let mut extra = c.clone();
    extra.records.push(Record::new("stage9.bogus.weight", Tensor::zeros(&[2])));
    match Checkpoint::<f64>::from_bytes(&extra.to_bytes()).unwrap().to_network() {
        Err(Error::UnknownTensor(got)) => assert_eq!(got, "stage9.bogus.weight"),
        other => panic!("{:?}", other.map(|_| ())),
    }

    let mut wrong = c.clone();
    wrong.records[0].value = Tensor::zeros(&[1, 2, 3]);
    assert!(matches!(wrong.to_network(), Err(Error::ExtentMismatch { ref name, .. }) if name == "stem.spatial.weight"));

    let mut short = c.clone();
    short.records.pop();
    assert!(matches!(short.to_network(), Err(Error::MissingTensor(name)) if name == "head.image.bias"));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::<f64>::from_bytes(&trailing), Err(Error::CorruptRecord { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inflate_then_deflate_restores_any_bank(
        values in prop::collection::vec(-10.0f64..10.0, 6),
        half in 0usize..5,
    ) {
        let t = 2 * half + 1;
        let w = Tensor::<f64>::from_f64(&[2, 3, 1], &values).unwrap();
        let back = deflate_bank(&inflate_bank(&w, t).unwrap()).unwrap();
        for (a, b) in w.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn truncated_files_never_parse(cut in 0usize..2000) {
        let net = Network::<f32>::build(&deep(BlockKind::R2D)).unwrap();
        let bytes = Checkpoint::from_network(&net).to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err());
    }
}
