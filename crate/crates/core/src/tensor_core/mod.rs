//! Deterministic reverse-mode autodiff with the layer set used by the
//! denoising, segmentation and classification networks.

pub mod adam;
pub mod conv;
pub mod init;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use init::xavier_uniform_init;
pub use tape::{BnMode, Gradients, RunningStats, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
