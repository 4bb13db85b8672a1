//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
pub mod kernels;
mod optim;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
