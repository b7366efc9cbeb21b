//! Dense f64 tensors and a recorded computation graph with reverse-mode
//! differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::{Shape, Tensor};

/// Rows whose L2 norm falls below this are rejected by every normalization.
pub const NORM_EPS: f64 = 1e-12;
pub use tensor::cosine_matrix as cosine_matrix_of;
