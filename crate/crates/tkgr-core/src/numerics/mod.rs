//! Dense tensors, reverse-mode differentiation, Adam, and checkpointing.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

#[cfg(test)]
mod tests;

pub use params::ParameterStore;
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
