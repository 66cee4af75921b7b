//! Small reverse-mode automatic differentiation engine over dense 2-D
//! tensors of `f64`.
//!
//! Graphs are built eagerly while the forward pass runs; parameters live in a
//! [`ParamStore`] outside the graph so that a fresh graph can be built for
//! every mini-batch.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod losses;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{grad_check, grad_check_params, rel_error};
pub use graph::{
    cosine, gelu, sigmoid, triplet_hinge, Gradients, Graph, TripletSemantics, Var, BCE_CLAMP,
    LAYER_NORM_EPS,
};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
