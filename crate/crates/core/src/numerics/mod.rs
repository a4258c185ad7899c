//! Dense tensors, the differentiable ops the networks use, a central
//! difference gradient checker and the binary tensor/checkpoint format.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheckReport};
pub use tensor::{Gradients, NetworkParams, Tensor};
