//! Minimal tensor autodiff: define-by-run graph, reverse-mode gradients and
//! tangent propagation expressed in the same primitives.

mod backward;
mod graph;
mod jvp;

pub use backward::Gradients;
pub use graph::{Graph, Var};
pub use jvp::{finite_diff_jvp, jvp_eval, jvp_forward, DualTensor, Trace};
