//! Dense tensors with tape-based reverse-mode differentiation and a
//! multiply-add counter.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, rel_err, GradCheck};
pub use real::{DType, Real};
#[allow(unused_imports)]
pub(crate) use real::{gemm, MatRef};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
