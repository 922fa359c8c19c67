//! Joint image and video training of a small UniDual-Aux network, against
//! separate baselines.
//!
//! cargo run --release --example joint_training -- [epochs]

use unidual::cli::DataConfig;
use unidual::model::{ModelConfig, Network, StageSpec};
use unidual::train::{run_training, EvalConfig, TrainConfig, Variant};

fn main() -> unidual::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = ModelConfig {
        height: 16,
        width: 16,
        stem_channels: 8,
        stages: vec![StageSpec::new(1, 8, 2), StageSpec::new(1, 16, 2), StageSpec::new(1, 32, 2)],
        ..ModelConfig::default()
    };
    let data = DataConfig { full_len: 8, ..DataConfig::default() };
    let eval = EvalConfig { videos: 50, images: 200, ..EvalConfig::default() };
    for variant in [Variant::R2d, Variant::R2p1d, Variant::Unidual, Variant::UnidualAux] {
        let cfg = variant.model_config(&base);
        let mut net = Network::<f32>::build(&cfg)?;
        let sources = data.sources_for(&cfg, variant.mode())?;
        let train = TrainConfig {
            variant,
            epochs,
            epoch_size: if variant.mode().is_joint() { 4000 } else { 2000 },
            ..TrainConfig::default()
        };
        let m = run_training(&mut net, &sources, &train, &eval, None, |_| {})?;
        let last = m.epochs.last().expect("at least one epoch");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!("{variant:<12} image top-1 {:>6}  video@1 {:>6}", fmt(last.top1), fmt(last.video1));
    }
    Ok(())
}
