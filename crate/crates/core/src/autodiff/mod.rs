//! Tape-based reverse-mode differentiation over dense row-major matrices,
//! plus the parameter store and Adam optimizer used to train the denoiser.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
