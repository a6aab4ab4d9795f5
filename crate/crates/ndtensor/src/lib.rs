//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is the one a small transformer encoder and a tree-structured
//! attention network need: matrix products, elementwise arithmetic, softmax,
//! `tanh`/SeLU/GeLU, layer normalisation, cross-entropy and a handful of
//! gather/concat helpers. Everything runs in 64-bit so that gradient checks
//! can use tight tolerances.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_param_gradients, finite_difference_check, Coordinates, FdReport};
pub use graph::{gelu, selu, Graph, Var, LAYER_NORM_EPS, SELU_ALPHA, SELU_LAMBDA};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
