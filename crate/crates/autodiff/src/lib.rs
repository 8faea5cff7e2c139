//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what a 3D DenseNet stream and a small
//! fully-connected meta network need: 3D convolution, max/global-average
//! pooling, batch normalization, ReLU, sigmoid, fully-connected layers,
//! channel concatenation, dropout and flattening, plus a handful of
//! reductions used by tests and loss plumbing.
//!
//! Tensors are laid out as `(batch, channel, z, y, x)` in C order. Every
//! operation records a node on a [`Graph`]; [`Graph::backward`] walks the
//! nodes in reverse creation order, which is a valid reverse topological
//! order because a node can only reference nodes created before it.
//!
//! ```
//! use mpstream_autodiff::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let w = g.param(Tensor::new(vec![3], vec![3.0, 3.0, 3.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[6.0, 6.0, 6.0]);
//! ```

mod error;
mod graph;
mod kernels;
mod param;
mod scalar;
mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use kernels::conv::Padding;
pub use kernels::norm::{BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use param::Parameter;
pub use scalar::Scalar;
pub use tensor::{Tensor, MAX_RANK};

/// Train or eval behaviour for batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
