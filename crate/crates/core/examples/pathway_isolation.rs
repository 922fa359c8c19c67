//! Which parameter groups receive gradient from which inputs, with and
//! without the auxiliary losses.
//!
//! cargo run --release --example pathway_isolation

use unidual::autograd::Group;
use unidual::cli::DataConfig;
use unidual::data::MixedStream;
use unidual::model::{ModelConfig, Network};
use unidual::nn::Modality;
use unidual::train::{compute_gradients, StepOptions, Variant};

fn main() -> unidual::Result<()> {
    let base = ModelConfig { height: 16, width: 16, ..ModelConfig::default() };
    let data = DataConfig { full_len: 8, ..DataConfig::default() };
    for variant in [Variant::Unidual, Variant::UnidualAux] {
        let cfg = variant.model_config(&base);
        let mut net = Network::<f64>::build(&cfg)?;
        for modality in [Modality::Image, Modality::Video] {
            let src = data.source(&cfg, modality)?;
            let batch = MixedStream::new(vec![src], 4, 0)?.next_batch::<f64>();
            net.store_mut().zero_grads();
            compute_gradients(&mut net, variant.mode(), &batch, &StepOptions::default())?;
            let reached: Vec<String> = Group::ALL
                .iter()
                .filter(|&&g| net.store().grad_l1(g) > 0.0)
                .map(|g| g.to_string())
                .collect();
            println!("{variant:<12} {modality}-only batch reaches: {}", reached.join(", "));
        }
    }
    Ok(())
}
