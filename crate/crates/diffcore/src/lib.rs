//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records ops eagerly; [`Graph::grad`] appends the backward
//! computation as new nodes, which is what makes second-order MAML possible:
//! an inner gradient step is just more graph, and the outer gradient
//! differentiates straight through it.

mod error;
pub mod finite_diff;
mod grad;
mod graph;
pub mod maml;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use error::{DiffError, Result};
pub use graph::{ConvGeom, Graph, NodeId};
pub use params::{Param, ParamNodes, ParamSet, Partition};
pub use real::Real;
pub use tensor::Tensor;
