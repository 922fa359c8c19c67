use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use unidual::model::{ModelConfig, Network, StageSpec};
use unidual::nn::BlockKind;
use unidual::surgery::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_unidual");

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn unidual(args: &[&str]) -> Run {
    let out = Command::new(BIN).args(args).output().expect("spawn unidual");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
[model]
height = 16
width = 16
stem_channels = 4
stages = [{ units = 1, channels = 8, spatial_stride = 2, temporal_stride = 1 }]

[data]
full_len = 8

[train]
epochs = 2
epoch_size = 32
batch_size = 8

[eval]
videos = 4
images = 8
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt")
}

#[test]
fn help_matches_golden_file_and_lists_every_key() {
    let run = unidual(&["--help"]);
    assert_eq!(run.code, 0);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(golden_path(), &run.stdout).unwrap();
    }
    let golden = fs::read_to_string(golden_path()).expect("golden help file");
    assert_eq!(run.stdout, golden, "rerun with UPDATE_GOLDEN=1 after intended changes");

    let defaults: toml::Table = toml::from_str(&unidual::cli::RunConfig::default().to_toml()).unwrap();
    fn leaves(t: &toml::Table, prefix: &str, out: &mut Vec<(String, toml::Value)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => leaves(inner, &key, out),
                other => out.push((key, other.clone())),
            }
        }
    }
    let mut keys = Vec::new();
    leaves(&defaults, "", &mut keys);
    assert!(keys.len() > 50);
    for (key, value) in keys {
        let line = run.stdout.lines().find(|l| l.trim_start().starts_with(&format!("{key} = ")));
        let line = line.unwrap_or_else(|| panic!("`{key}` missing from --help"));
        if !matches!(value, toml::Value::Array(_)) {
            assert!(line.ends_with(&value.to_string()), "{line} vs {value}");
        }
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let run = unidual(&["frobnicate"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("Usage"), "{}", run.stderr);
    assert!(run.stdout.is_empty());

    assert_eq!(unidual(&[]).code, 1);

    let run = unidual(&["train", "--config", p(&cfg), "--out", "x", "--set", "train.loss_weights.bogus=1"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("train.loss_weights.bogus"), "{}", run.stderr);

    let run = unidual(&["train", "--config", p(&cfg), "--out", "x", "--set", "train.epochs=many"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("train.epochs"), "{}", run.stderr);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[modle]\nheight = 8\n").unwrap();
    let run = unidual(&["eval", "--config", p(&bad), "--checkpoint", "none.udck"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("`modle`"), "{}", run.stderr);

    assert_eq!(unidual(&["convert", "--in", "a", "--out", "b"]).code, 1);
    assert_eq!(unidual(&["convert", "--inflate", "--in", "a", "--out", "b"]).code, 1);
    assert_eq!(unidual(&["gradcheck", "--precision", "32"]).code, 1);
    assert_eq!(unidual(&["train", "--config", p(&cfg), "--mode", "finetune_image", "--out", "x"]).code, 1);

    let corrupt = dir.path().join("corrupt.udck");
    fs::write(&corrupt, b"NOPE\x01\x00\x00\x00\x04").unwrap();
    let run = unidual(&["eval", "--checkpoint", p(&corrupt)]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("magic"), "{}", run.stderr);
    assert_eq!(unidual(&["eval", "--checkpoint", p(&dir.path().join("missing.udck"))]).code, 2);
}

fn small_unidual() -> Network<f32> {
    let cfg = ModelConfig {
        height: 8,
        width: 8,
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1), StageSpec::new(1, 8, 2)],
        seed: 17,
        ..ModelConfig::default()
    };
    Network::build(&cfg).unwrap()
}

#[test]
fn convert_round_trip_reaches_the_tap_average_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let [vid, img, vid2, img2] = ["vid", "img", "vid2", "img2"].map(|n| dir.path().join(format!("{n}.udck")));
    let net = small_unidual();
    Checkpoint::from_network(&net).save(&vid).unwrap();

    assert_eq!(unidual(&["convert", "--deflate", "--in", p(&vid), "--out", p(&img)]).code, 0);
    assert_eq!(unidual(&["convert", "--inflate", "--t", "3", "--in", p(&img), "--out", p(&vid2)]).code, 0);
    let source = Checkpoint::<f32>::load(&vid).unwrap();
    let inflated = Checkpoint::<f32>::load(&vid2).unwrap();
    assert_eq!(inflated.config.arch, BlockKind::R2P1D);
    // Stored precision is preserved.
    assert_eq!(fs::read(&vid2).unwrap()[8], 4);
    let mut checked = 0;
    for r in &inflated.records {
        let Some(prefix) = r.name.strip_suffix(".point.weight") else { continue };
        let taps = &source.record(&format!("{prefix}.video.weight")).unwrap().value;
        let t = taps.shape()[2];
        assert_eq!(r.value.shape()[..2], taps.shape()[..2]);
        for (i, group) in r.value.data().chunks(3).enumerate() {
            let mean = taps.data()[i * t..(i + 1) * t].iter().sum::<f32>() / 3.0;
            for v in group {
                assert!((v - mean).abs() <= 1e-6 * mean.abs().max(1.0), "{}: {v} vs {mean}", r.name);
            }
        }
        checked += 1;
    }
    assert!(checked >= 5);

    // A second deflation returns the first one.
    assert_eq!(unidual(&["convert", "--deflate", "--in", p(&vid2), "--out", p(&img2)]).code, 0);
    let (a, b) = (Checkpoint::<f32>::load(&img).unwrap(), Checkpoint::<f32>::load(&img2).unwrap());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.name, y.name);
        for (u, v) in x.value.data().iter().zip(y.value.data()) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
        }
    }
}

#[test]
fn train_writes_contract_files_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs/a");
    let run = unidual(&["train", "--config", p(&cfg), "--mode", "unidual_aux", "--out", p(&out)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(run.stdout, csv);
    assert!(out.join("final.udck").exists());

    let run = unidual(&["eval", "--config", p(&cfg), "--checkpoint", p(&out.join("final.udck"))]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let metric = |name: &str| run.stdout.lines().find_map(|l| l.strip_prefix(&format!("{name} "))).unwrap().to_string();
    assert_eq!(metric("top1"), last[6]);
    assert_eq!(metric("video1"), last[9]);

    // The resolved config reproduces the run.
    let again = dir.path().join("runs/b");
    let resolved = out.join("config.toml");
    assert_eq!(unidual(&["train", "--config", p(&resolved), "--out", p(&again)]).code, 0);
    assert_eq!(fs::read(out.join("final.udck")).unwrap(), fs::read(again.join("final.udck")).unwrap());

    // Finetune an inflated image model on the video task.
    let img = dir.path().join("img.udck");
    assert_eq!(unidual(&["convert", "--deflate", "--in", p(&out.join("final.udck")), "--out", p(&img)]).code, 0);
    let ft = dir.path().join("runs/ft");
    let run = unidual(&["train", "--config", p(&cfg), "--mode", "finetune_video", "--init", p(&img), "--out", p(&ft)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stderr.contains("initialized from"));
}

#[test]
fn synth_and_inspect_write_named_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let syn = dir.path().join("syn");
    let run = unidual(&["synth", "--config", p(&cfg), "--out", p(&syn), "--count", "2"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(syn.join("image_1.ppm").exists() && syn.join("video_1_7.ppm").exists());
    assert!(fs::read(syn.join("image_0.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));

    let ckpt = dir.path().join("net.udck");
    // Untrained batch norm has no running statistics, so use a norm-free model.
    let model = unidual::cli::RunConfig::from_toml(&TINY.replace("[model]", "[model]\nnorm = \"none\"")).unwrap();
    Checkpoint::from_network(&Network::<f64>::build(&model.variant_model()).unwrap()).save(&ckpt).unwrap();
    let maps = dir.path().join("maps");
    let run = unidual(&["inspect", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--unit", "0", "--k", "3", "--out", p(&maps)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let mut names: Vec<String> = fs::read_dir(&maps).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    assert!(names.iter().all(|n| (n.starts_with("video_0_") || n.starts_with("image_0_")) && n.ends_with(".pgm")));
    assert_eq!(run.stdout.lines().count(), 4);
}
