//! Dense tensors, taped reverse-mode differentiation, and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{concat, matmul, matmul_nt, softmax, split, Tensor};
pub(crate) use tape::log_sum_exp;
