//! Dense `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! Everything runs single-threaded in a fixed order, so identical inputs
//! produce bit-identical values and gradients across runs.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Binding, Init, ParamStore, Scope};
pub use tensor::{nearest_index, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs a different element count than {len}")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}
