//! Dense tensors, reverse-mode differentiation and small linear-algebra helpers.

mod graph;
mod linalg;
mod stats;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use linalg::{min_singular_value, symmetric_eigenvalues};
pub(crate) use stats::log_softmax_in_place;
pub use stats::{channel_stats, entropy, kl_divergence, softmax_rows};
pub use tensor::{matmul, Tensor};
