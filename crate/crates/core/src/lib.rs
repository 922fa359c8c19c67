//! Framework-free building blocks for joint image and video classification
//! with UniDual networks: a shared 2D spatial convolution per block followed
//! by dual point-wise branches, one per modality.
//!
//! The crate covers the full stack at desk scale:
//!
//! * [`autograd`]: tensors, primitive differentiable ops, reverse-mode tape,
//!   finite-difference gradient checking.
//! * [`nn`]: R2D, R(2+1)D and UniDual blocks and residual units.
//! * [`model`]: network assembly from a [`model::ModelConfig`], pathway
//!   dispatch, auxiliary head removal, activation inspection.
//! * [`surgery`]: the `UDCK` checkpoint format plus inflate/deflate weight
//!   conversions.
//! * [`data`]: synthetic shape images, moving-shape clips and the mixed
//!   multi-source batch stream.
//! * [`train`]: learning-rate schedules, SGD, loss routing for every training
//!   regime, evaluation protocols and the run loop.
//! * [`cli`]: the `unidual` command-line front end.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

// Training allocates and frees many activation-sized buffers per step; the
// system allocator returns them to the kernel and pays page faults each time.
#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
