//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! All values are `f64`. A [`Tape`] is single-threaded; independent tapes
//! can run on separate threads.

pub mod attention;
pub mod gradcheck;
pub mod kernel;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use attention::{peak_score_block, reset_peak_score_block, AttentionLayout};
pub use gradcheck::{grad_check, grad_check_many, grad_check_sampled, GradCheck, GradCheckError};
pub use kernel::pairwise_sq_dists;
pub use optim::{AdamConfig, OptimizerError, OptimizerState};
pub use tape::{Gradients, Tape, TapeEntry, Var};
pub use tensor::{Tensor, TensorError};
