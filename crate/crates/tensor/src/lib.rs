//! Dense row-major tensors and a tape-based reverse-mode differentiation
//! engine.
//!
//! A [`Graph`] records every primitive applied to tensors that require
//! gradients. Calling [`Graph::backward`] on a scalar node walks the tape in
//! reverse and leaves `d root / d leaf` on every differentiable leaf.
//!
//! Element width is chosen per run: `f32` for training, `f64` for finite
//! difference checks. Both implement [`Element`].

pub mod check;
mod element;
mod error;
mod graph;
pub mod kernels;
mod tensor;
pub mod tns;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Attrs, Axis, Graph, Primitive, Var};
pub use tensor::Tensor;
