//! Dense tensors, reverse-mode autodiff, AdamW, and checkpoint I/O.

pub mod checkpoint;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Tensor};
