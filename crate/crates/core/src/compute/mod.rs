//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::dot;

/// Epsilon used by every layer norm in the encoders.
pub const LAYER_NORM_EPS: f64 = 1e-5;
