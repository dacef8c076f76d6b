//! Dense arrays, the reverse-mode tape, Adam, and the finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_difference_check, FdReport};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use tensor::{Parameters, Tensor};

/// Variance floor used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
