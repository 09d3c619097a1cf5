//! Dense matrices, the reverse-mode tape, finite differences, and the
//! TSR1 on-disk container.

mod fd;
mod matrix;
mod tape;
pub mod tsr1;

pub use fd::finite_diff_grad;
pub use matrix::{max_rel_err, rel_err, Matrix};
pub use tape::{Gradients, LeafKind, Tape, TensorRef};
