//! Dense tensors, tape-based reverse-mode differentiation, MLP layers and the
//! AdamW optimizer. Everything runs in `f64` on the CPU.

mod adam;
pub mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, BoundMlp, Linear, MlpNet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
