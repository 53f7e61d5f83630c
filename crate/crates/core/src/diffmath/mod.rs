//! Dense matrices, special functions and tape-based reverse-mode gradients.

pub mod gradcheck;
pub mod special;
mod tape;
mod tensor;

pub use special::{digamma, lgamma, trigamma};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;

pub(crate) use tape::{rms_norm_rows, softmax_in_place};
