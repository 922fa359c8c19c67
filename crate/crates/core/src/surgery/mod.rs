//! Checkpoint persistence in the `UDCK` binary format and the weight
//! conversions between 2D and (2+1)D networks.
//!
//! Layout (all integers little-endian): magic `UDCK`, `u32` version, `u8`
//! payload width (4 or 8), `u32` length plus the model config as TOML, then a
//! record section and an optional optimizer section. A section is a `u32`
//! count of records, each `u32` name length, name, `u8` rank, `u64` extents,
//! `u64` value count and the raw values. The optimizer section is preceded by
//! a `u8` presence flag. Trailing bytes are rejected.

mod checkpoint;
mod convert;

pub use checkpoint::{Checkpoint, Record, MAGIC, VERSION};
pub use convert::{deflate_bank, deflate_weights, inflate_bank, inflate_weights};

use std::path::Path;

use crate::error::Result;
use crate::model::Network;
use crate::tensor::Real;

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    Checkpoint::load(path)?.to_network()
}

#[cfg(test)]
mod tests;
