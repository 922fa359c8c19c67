//! Reverse-mode automatic differentiation over a linear tape, the primitive
//! differentiable ops, and a finite-difference gradient checker.

pub mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{check_layers, grad_check, relative_error, LAYER_KINDS, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Group, ParamId, ParamStore, Parameter};
pub use tape::{BatchStats, Grads, NormMode, OpKind, PoolAxes, Tape, Var};

#[cfg(test)]
mod tests;
