//! Dense tensors, their kernels, and the reverse-mode tape both models are
//! trained with.

mod gradcheck;
mod init;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheck, ABS_FLOOR, REL_TOL, ROUNDOFF_ULPS};
pub use init::ParamInit;
pub use ops::{cross_entropy_rows, dropout, gather_rows, gelu, matmul, softmax_rows};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, NodeId, OpClass, OpCounters, Tape};
pub use tensor::{Scalar, Tensor};
