//! Reverse-mode automatic differentiation over dense `NCHW` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records every operation
//! applied to its [`Var`]s on a tape, and [`Graph::backward`] walks the tape
//! in reverse to produce gradients for every node that transitively depends
//! on a leaf created with `requires_grad = true`. Nodes that do not depend on
//! such a leaf are never visited during the backward pass, which is how
//! stop-gradient (frozen parameters, detached teacher outputs) is expressed.
//!
//! All kernels are single-threaded and free of data-dependent reduction
//! order, so results are bit-reproducible on one platform.

mod error;
mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Var};
pub use kernels::GaussianWindow;
pub use real::Real;
pub use tensor::Tensor;
