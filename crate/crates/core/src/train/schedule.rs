use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Warm-up, then divide by `decay_factor` every `step_every` epochs.
    WarmupStep,
    /// Warm-up, then a half cosine down to zero at `total_epochs`.
    WarmupCosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup_step" => Ok(ScheduleKind::WarmupStep),
            "warmup_cosine" => Ok(ScheduleKind::WarmupCosine),
            _ => Err(Error::InvalidArgument(format!("schedule must be warmup_step or warmup_cosine, got `{s}`"))),
        }
    }
}

/// Learning rate as a function of the fractional epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub step_every: f64,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return fail(format!(
                "warmup_epochs must be in [0, total_epochs), got {} of {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.kind == ScheduleKind::WarmupStep && !(self.step_every > 0.0 && self.decay_factor > 0.0) {
            return fail("step_every and decay_factor must be positive".into());
        }
        Ok(())
    }

    /// Linear ramp from `base_lr / 10` at epoch 0 to `base_lr` at the end of
    /// warm-up, followed by the step or cosine phase.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        self.validate()?;
        if !(epoch >= 0.0 && epoch < self.total_epochs) {
            return Err(Error::InvalidArgument(format!("epoch {epoch} outside [0, {})", self.total_epochs)));
        }
        let base = self.base_lr;
        if epoch < self.warmup_epochs {
            return Ok(base / 10.0 + (base - base / 10.0) * epoch / self.warmup_epochs);
        }
        let t = epoch - self.warmup_epochs;
        Ok(match self.kind {
            ScheduleKind::WarmupStep => base / self.decay_factor.powf((t / self.step_every).floor()),
            ScheduleKind::WarmupCosine => 0.5 * base * (1.0 + (PI * t / (self.total_epochs - self.warmup_epochs)).cos()),
        })
    }
}
