//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values are [`Tensor`]s; differentiable computations are recorded on a
//! [`Graph`] through [`Var`] handles and differentiated with
//! [`Graph::backward`]. All kernels are generic over [`Float`] so the same
//! model code runs in `f32` for training and in `f64` for gradient checks.

mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod parallel;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dOpts;
pub use ops::shape::{PadMode, UpsampleMode};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{numel, strides, Tensor};
