//! Numeric substrate: matrices, a reverse-mode tape, layers, AdamW,
//! finite-difference checking and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sinusoidal_table, softmax_rows, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod op_tests;
