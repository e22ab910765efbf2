//! Dense `f64` tensors, a reverse-mode tape, Adam, and a finite-difference
//! gradient oracle. Every model in the crate is built from these pieces.

mod adam;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_update, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::{sigmoid, softplus};
