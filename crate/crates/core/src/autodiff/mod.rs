//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
pub mod suite;
mod tensor;

pub use graph::{Gradients, Graph, Var, MIN_COSINE_NORM};
pub use rng::{mix, Mode, SeedStream};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
