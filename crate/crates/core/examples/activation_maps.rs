//! Ranks the channels of one unit by peak response to a moving-shape clip and
//! writes the same channels of both pathways as PGM files.
//!
//! cargo run --release --example activation_maps -- [out_dir]

use unidual::data::{gen_motion_clip, write_pgm, SourceSpec};
use unidual::model::{top_activated_maps, ModelConfig, Network};
use unidual::nn::NormKind;

fn main() -> unidual::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "activation_maps".into());
    std::fs::create_dir_all(&out).map_err(|e| unidual::Error::io(&out, e))?;
    // Untrained batch norm has no running statistics to evaluate with, so this
    // demo inspects a norm-free network. `unidual inspect` takes a trained checkpoint.
    let net = Network::<f64>::build(&ModelConfig { norm: NormKind::None, ..ModelConfig::default() })?;
    let clip = gen_motion_clip::<f64>(&SourceSpec::video(1, 3, 32, 32, 8), 0, 0);
    let report = top_activated_maps(&net, &clip.pixels, 0, 4)?;
    for (p, d) in report.ranked.iter().zip(&report.dual) {
        println!("channel {:>2}: video peak {:.3}, image peak {:.3}", p.channel, p.peak, d.peak);
        let scale = p.peak.max(d.peak).max(1e-12);
        for (tag, m) in [("video", p), ("image", d)] {
            let s = m.map.shape();
            let (l, h, w) = (s[0], s[1], s[2]);
            let frame: Vec<f64> = m.map.data()[(l / 2) * h * w..][..h * w].iter().map(|v| v / scale).collect();
            write_pgm(format!("{out}/{tag}_0_{}.pgm", m.channel), w, h, &frame)?;
        }
    }
    Ok(())
}
