//! Finite-difference check of every layer type and of a full UniDual network
//! with auxiliary heads.
//!
//! cargo run --release --example gradient_check

use unidual::autograd::{check_layers, GradCheckOptions};
use unidual::model::{check_network, ModelConfig, Network};
use unidual::nn::NormKind;
use unidual::train::Variant;

fn main() -> unidual::Result<()> {
    let opts = GradCheckOptions::default();
    for (kind, report) in check_layers(&opts)? {
        println!("{kind:<16} {:.2e}", report.max_rel_error());
    }

    let cfg = Variant::UnidualAux.model_config(&ModelConfig {
        height: 16,
        width: 16,
        norm: NormKind::None,
        ..ModelConfig::default()
    });
    let net = Network::<f64>::build(&cfg)?;
    let report = check_network(&net, 2, &GradCheckOptions { max_coords_per_param: 4, ..opts })?;
    for (group, err) in report.by_group() {
        println!("{group:<16} {err:.2e}");
    }
    println!("kink-straddling coordinates resampled: {}", report.kinks_skipped());
    println!("passed: {}", report.passed());
    Ok(())
}
