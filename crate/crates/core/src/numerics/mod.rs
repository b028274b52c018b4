//! Dense 2-D tensors, reverse-mode autodiff, and the Adam optimizer.

mod checkpoint;
mod graph;
mod nn;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use graph::{sigmoid, softplus, Graph, Reduce, Var};
pub use nn::{Activation, Dense, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use thiserror::Error;

/// Seeded generator used for every stochastic operation in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error at node {node} ({op}): {detail}")]
    Domain {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
