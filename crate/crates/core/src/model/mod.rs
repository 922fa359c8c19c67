//! Network assembly: stem, staged residual units and pooled heads built from
//! a [`ModelConfig`], with single-pathway dispatch per input.

mod check;
mod config;
mod inspect;
mod network;

pub use check::check_network;
pub use config::{ModelConfig, NormStatsMode, StageSpec};
pub use inspect::{rank_channels, top_activated_maps, ActivationMap, ActivationReport};
pub use network::{Batch, HeadId, HeadOutput, Network, NORM_MOMENTUM};
