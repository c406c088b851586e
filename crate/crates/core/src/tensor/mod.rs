//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every random quantity an op consumes (dropout masks, Gumbel noise) is an
//! explicit argument; nothing in this module owns a generator.

mod dense;
mod functional;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use functional::{cosine_similarity, gumbel_from_uniform, gumbel_softmax_st};
pub use gradcheck::finite_difference_check;
pub use scalar::{DType, Scalar};
pub use tape::{Conv1dSpec, Gradients, Tape, Var};

pub(crate) use ops::argmax;
