//! The `unidual` command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configuration, 2 when a
//! valid request fails at run time (divergence, corrupt checkpoint, i/o).

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

pub use config::{documented_defaults, DataConfig, RunConfig};

use crate::autograd::{check_layers, GradCheckOptions, Group};
use crate::data::{gen_motion_clip, gen_shape_image, write_frame, write_pgm};
use crate::error::{Error, Result};
use crate::model::{check_network, top_activated_maps, ActivationMap, Network};
use crate::nn::{Modality, NormKind};
use crate::surgery::{deflate_weights, inflate_weights, Checkpoint};
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate_all, finetune_network, run_training, EpochRecord, Variant, CSV_HEADER};

#[derive(Parser, Debug)]
#[command(name = "unidual", version, about = "Joint image and video classification with UniDual networks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump synthetic examples as PGM/PPM files.
    Synth(SynthArgs),
    /// Train one variant; writes metrics.csv and final.udck.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out synthetic data.
    Eval(EvalArgs),
    /// Convert checkpoints between image and video networks.
    Convert(ConvertArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the most activated maps of one unit for both pathways.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file with [model], [data], [train] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.sets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Image,
    Video,
    Both,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Examples per source.
    #[arg(long, default_value_t = 4)]
    count: u64,
    #[arg(long, value_enum, default_value_t = Kind::Both)]
    kind: Kind,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Variant to train; overrides train.variant.
    #[arg(long, value_parser = parse_variant)]
    mode: Option<Variant>,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained checkpoint. Finetune variants convert it to the task's
    /// architecture; other variants load every matching tensor.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Temporal taps when inflating an image checkpoint for video finetuning.
    #[arg(long, default_value_t = 3)]
    t: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("direction").required(true).args(["deflate", "inflate"]))]
struct ConvertArgs {
    /// Video (R(2+1)D or UniDual) to image (R2D) by summing temporal taps.
    #[arg(long)]
    deflate: bool,
    /// Image (R2D) to video (R(2+1)D) by spreading weights over --t taps.
    #[arg(long, requires = "t")]
    inflate: bool,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Overrides model.norm.
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormKind>,
    /// Sampled coordinates per parameter tensor of the full network.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    /// Examples per modality in the full-network loss.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Residual unit index, counted from 0 in forward order.
    #[arg(long, default_value_t = 0)]
    unit: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Pathway of the probe example; the other pathway gives the dual maps.
    #[arg(long, value_enum, default_value_t = Kind::Video)]
    input: Kind,
    /// Index of the held-out example used as probe.
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_norm(s: &str) -> std::result::Result<NormKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn command() -> clap::Command {
    Cli::command().after_help(documented_defaults())
}

/// Full `--help` text.
pub fn help_text() -> String {
    command().render_long_help().to_string()
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(&a),
            Precision::F64 => train::<f64>(&a),
        },
        Command::Eval(a) => match a.precision {
            Precision::F32 => eval::<f32>(&a),
            Precision::F64 => eval::<f64>(&a),
        },
        Command::Convert(a) => convert(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.config.load()?;
    create_dir(&a.out)?;
    let seed = cfg.train.seed;
    let ext = image_ext(cfg.model.in_channels);
    if a.kind != Kind::Video {
        let src = cfg.data.source(&cfg.model, Modality::Image)?;
        for i in 0..a.count {
            let ex = gen_shape_image::<f64>(&src, seed, i);
            let name = format!("image_{i}.{ext}");
            write_frame(a.out.join(&name), &ex.pixels, 0)?;
            println!("{name} label={}", ex.label);
        }
    }
    if a.kind != Kind::Image {
        let src = cfg.data.source(&cfg.model, Modality::Video)?;
        for i in 0..a.count {
            let ex = gen_motion_clip::<f64>(&src, seed, i);
            for f in 0..src.clip_len {
                write_frame(a.out.join(format!("video_{i}_{f}.{ext}")), &ex.pixels, f)?;
            }
            let (shape, dir) = (ex.label / src.directions, ex.label % src.directions);
            println!("video_{i}_*.{ext} label={} shape={shape} direction={dir}", ex.label);
        }
    }
    Ok(())
}

fn finetune_task(v: Variant) -> Option<Modality> {
    match v {
        Variant::FinetuneImage => Some(Modality::Image),
        Variant::FinetuneVideo => Some(Modality::Video),
        _ => None,
    }
}

fn train<T: Real>(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.mode {
        cfg.train.variant = v;
        cfg.validate()?;
    }
    let variant = cfg.train.variant;
    let mut net = match (finetune_task(variant), &a.init) {
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!("variant {variant} needs --init <checkpoint>")));
        }
        (Some(task), Some(init)) => {
            let (net, fresh) = finetune_network(&Checkpoint::<T>::load(init)?, task, a.t)?;
            eprintln!("initialized from {}; {} tensors start fresh", init.display(), fresh.len());
            net
        }
        (None, init) => {
            let mut net = Network::<T>::build(&cfg.variant_model())?;
            if let Some(init) = init {
                let fresh = Checkpoint::<T>::load(init)?.apply_partial(&mut net)?;
                eprintln!("initialized from {}; {} tensors start fresh", init.display(), fresh.len());
            }
            net
        }
    };
    let sources = cfg.data.sources_for(net.config(), variant.mode())?;
    create_dir(&a.out)?;
    let resolved = a.out.join("config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    println!("{CSV_HEADER}");
    let with_time = cfg.train.record_time;
    run_training(&mut net, &sources, &cfg.train, &cfg.eval, Some(&a.out), |r: &EpochRecord| {
        println!("{}", r.csv_line(with_time));
    })?;
    Ok(())
}

fn eval<T: Real>(a: &EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let net = Checkpoint::<T>::load(&a.checkpoint)?.to_network()?;
    let sources = cfg.data.sources(net.config())?;
    let mut rec = EpochRecord::default();
    evaluate_all(&net, &sources, &cfg.eval, &mut rec)?;
    for (name, v) in [("top1", rec.top1), ("top5", rec.top5), ("clip1", rec.clip1), ("video1", rec.video1)] {
        if let Some(v) = v {
            println!("{name} {v}");
        }
    }
    Ok(())
}

fn convert_as<T: Real>(a: &ConvertArgs, bytes: &[u8]) -> Result<()> {
    let src = Checkpoint::<T>::from_bytes(bytes)?;
    let out = if a.deflate {
        deflate_weights(&src)?
    } else {
        inflate_weights(&src, a.t.expect("clap requires --t"))?
    };
    out.save(&a.out)?;
    println!("{} ({}) -> {} ({})", a.input.display(), src.config.arch, a.out.display(), out.config.arch);
    Ok(())
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let bytes = fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    match Checkpoint::<f64>::stored_width(&bytes)? {
        4 => convert_as::<f32>(a, &bytes),
        _ => convert_as::<f64>(a, &bytes),
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.precision != Precision::F64 {
        return Err(Error::InvalidArgument("gradient checks run in 64-bit precision only".into()));
    }
    let cfg = a.config.load()?;
    let mut model = cfg.variant_model();
    if let Some(norm) = a.norm {
        model.norm = norm;
    }
    let opts = GradCheckOptions {
        tol: a.tol,
        seed: model.seed,
        ..GradCheckOptions::default()
    };
    let mut ok = true;
    for (kind, r) in check_layers(&opts)? {
        ok &= r.passed();
        println!("layer {kind:<16} max_rel_err {:.3e}", r.max_rel_error());
    }
    let net = Network::<f64>::build(&model)?;
    let report = check_network(
        &net,
        a.batch,
        &GradCheckOptions {
            max_coords_per_param: a.coords,
            ..opts
        },
    )?;
    ok &= report.passed();
    let groups = report.by_group();
    for g in Group::ALL {
        if let Some(e) = groups.get(&g) {
            println!("group {:<15} max_rel_err {e:.3e}", g.as_str());
        }
    }
    let checked: usize = report.params.iter().map(|p| p.coords).sum();
    println!("network coordinates {checked}, skipped at ReLU/max-pool kinks {}", report.kinks_skipped());
    println!("{} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, a.tol);
    if ok {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("relative error above {:e}", a.tol)))
    }
}

/// Middle frame of an `L×H×W` map scaled by `scale` into `[0, 1]`.
fn write_map(path: &Path, m: &ActivationMap<f64>, scale: f64) -> Result<()> {
    let &[l, h, w] = m.map.shape() else {
        return Err(Error::shape("inspect", format!("unexpected map shape {:?}", m.map.shape())));
    };
    let frame = &m.map.data()[(l / 2) * h * w..][..h * w];
    let values: Vec<f64> = frame.iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect();
    write_pgm(path, w, h, &values)
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let net = Checkpoint::<f64>::load(&a.checkpoint)?.to_network()?;
    let model = net.config().clone();
    let input: Tensor<f64> = match a.input {
        Kind::Image => gen_shape_image(&cfg.data.source(&model, Modality::Image)?, cfg.eval.seed, a.index).pixels,
        Kind::Video => gen_motion_clip(&cfg.data.source(&model, Modality::Video)?, cfg.eval.seed, a.index).pixels,
        Kind::Both => return Err(Error::InvalidArgument("inspect needs --input image or video".into())),
    };
    let report = top_activated_maps(&net, &input, a.unit, a.k)?;
    let dual = match report.pathway {
        Modality::Image => Modality::Video,
        Modality::Video => Modality::Image,
    };
    create_dir(&a.out)?;
    println!("rank channel {}_peak {}_peak", report.pathway, dual);
    for (rank, (p, d)) in report.ranked.iter().zip(&report.dual).enumerate() {
        let scale = p.peak.max(d.peak).max(1e-12);
        write_map(&a.out.join(format!("{}_{}_{}.pgm", report.pathway, a.unit, p.channel)), p, scale)?;
        write_map(&a.out.join(format!("{}_{}_{}.pgm", dual, a.unit, d.channel)), d, scale)?;
        println!("{} {} {:.6} {:.6}", rank + 1, p.channel, p.peak, d.peak);
    }
    Ok(())
}
