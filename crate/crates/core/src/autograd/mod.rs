//! Minimal reverse-mode differentiation over NCHW tensors.

pub mod kernels;
mod regions;
mod tape;

pub use kernels::ConvGeom;
pub use regions::RegionIndex;
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod gradcheck;
