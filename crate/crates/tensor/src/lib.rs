//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] whose
//! methods are the differentiable primitives (convolution, attention,
//! interpolation, pooling, normalization, elementwise ops). Training runs in
//! `f32`; [`grad_check`] runs the same graphs in `f64`.

pub mod error;
pub mod fault;
mod gradcheck;
mod graph;
mod ops;
mod scalar;
pub mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use ops::{bilinear_taps, permutation_index, ZERO_INDEX};
pub use scalar::Scalar;
pub use tensor::Tensor;
