//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Tapes are single-threaded; tensors are plain values and can be sent
//! between threads.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
