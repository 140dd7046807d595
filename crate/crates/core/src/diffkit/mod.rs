//! Minimal deterministic tensor core with reverse-mode differentiation.
//!
//! Only the operators the miniature UNet needs are provided. Every operator
//! records itself on a [`Graph`]; [`Graph::backward`] walks the record in
//! reverse and returns gradients for every leaf created with
//! `requires_grad = true`. Frozen leaves cost nothing on the backward pass
//! beyond propagating input gradients through them.

mod attn;
mod conv;
pub mod exec;
mod gemm;
mod graph;
mod tensor;

pub use graph::{FlopCounter, Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use conv::naive_conv;
#[cfg(test)]
pub(crate) use conv::ConvGeom;
