//! Minimal reverse-mode differentiation engine.
//!
//! Double precision throughout, dense layers with an optional fast-weight
//! branch, softmax/cross-entropy and the scalar ops needed for actor-critic
//! losses. Operations are recorded on a [`Graph`] tape; [`Graph::backward`]
//! replays them in reverse, accumulating gradients additively into every
//! tensor that requires them. [`Graph::truncate`] drops the recorded history
//! while leaving leaf parameter values untouched, which is what bounds memory
//! in online training: the tape never outlives one BPTT window.

mod graph;
mod optim;
mod tensor;

pub use graph::{Activation, Graph};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
