//! Minimal dense tensor library with define-by-run reverse-mode autodiff.
//!
//! All arithmetic is `f64` with deterministic kernels: every reduction runs
//! in a fixed order, so repeated runs produce bit-identical values and
//! gradients. [`gradcheck`] provides the central-difference oracle used to
//! validate every differentiable operation.

mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradCheck};
pub use ops::elementwise::{normal_cdf, sigmoid, softplus};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
