//! A small dense-tensor library with a reverse-mode tape.
//!
//! Only the operations needed by recurrent convolutional policies are
//! provided: convolution, max-pooling, fully-connected layers, GRU cells,
//! batch normalization, softmax / cross-entropy losses and elementwise
//! products. Everything runs on `f64`.

mod error;
mod graph;
mod kernels;
mod param;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use error::{Result, TensorError};
pub use graph::{Graph, Mode, Var};
pub use param::{BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
