//! A minimal tape-based reverse-mode automatic differentiation core.
//!
//! The operator set is deliberately narrow: it covers exactly what the
//! gait encoders need (projections, token merging, multi-head
//! self-attention, layer and batch normalization, L2 normalization and
//! the pieces of the triplet loss). Values are 64-bit floats.
//!
//! A [`Graph`] is built fresh for every forward pass. Trainable values
//! live in a [`ParamStore`] and are bound into the graph with
//! [`Graph::param`]; after [`Graph::backward`] the gradients are folded
//! back into the store with [`Graph::accumulate_param_grads`].

mod error;
mod graph;
pub mod gradcheck;
pub mod layers;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{BufferId, BufferUpdate, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Whether normalization layers use batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
