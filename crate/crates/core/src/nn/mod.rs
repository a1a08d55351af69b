//! Minimal dense autodiff engine backing the segmentation network.

pub mod conv;
pub mod graph;
pub mod ops;
pub mod params;
pub mod real;

pub use graph::{Backward, Gradients, Graph, Tensor, Var};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
