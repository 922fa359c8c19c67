//! Warm-up followed by step decay or cosine annealing.
//!
//! cargo run --example lr_schedules

use unidual::train::{Schedule, ScheduleKind};

fn main() -> unidual::Result<()> {
    let step = Schedule {
        kind: ScheduleKind::WarmupStep,
        base_lr: 0.01,
        warmup_epochs: 10.0,
        total_epochs: 45.0,
        step_every: 10.0,
        decay_factor: 10.0,
    };
    let cosine = Schedule { kind: ScheduleKind::WarmupCosine, ..step };
    println!("epoch      step    cosine");
    for e in (0..45).step_by(5) {
        println!("{e:>5}  {:.2e}  {:.2e}", step.lr_at(e as f64)?, cosine.lr_at(e as f64)?);
    }
    Ok(())
}
