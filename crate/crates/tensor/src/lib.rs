//! Minimal dense `f64` tensors with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] and addressed through [`Var`] handles. The op set covers what a
//! small stereo network needs: 2D/3D (transposed) convolution, softmax,
//! broadcasting arithmetic, reductions and a few shape ops. Ops defined
//! elsewhere plug into the tape through [`CustomOp`].

mod conv;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use conv::{convolve, ConvGeometry, ConvRank, ConvSpec};
pub use error::{Result, TensorError};
pub use gradcheck::gradient_check;
pub use graph::{CustomOp, Graph, Var};
pub use ops::{axis_split, flip_tensor, softmax_tensor};
pub use tensor::Tensor;
