//! Minimal CPU autograd engine used by the recolor network and the
//! classifiers: `f32` tensors, a tape of ops with hand-written backward
//! passes, parameter storage and an Adam optimizer.

mod graph;
pub(crate) mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use layers::{BatchNorm, Conv2d, LayerNorm, Linear};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
