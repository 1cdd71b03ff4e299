//! Forward and adjoint kernels on raw tensors, independent of the tape.

pub mod elementwise;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod sequence;
