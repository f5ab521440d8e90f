//! Minimal reverse-mode automatic differentiation: dense tensors, a
//! recording tape, and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{sigmoid, softmax_rows, Tape, UnaryKind, Var};
pub use tensor::{Scalar, Tensor};
