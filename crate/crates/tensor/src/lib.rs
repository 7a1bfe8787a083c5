//! Reverse-mode automatic differentiation for small 2D convolutional
//! networks, generic over `f32` / `f64`.
//!
//! Tensors carry no batch axis; images are `[C, H, W]`. Operations are
//! recorded on a [`Graph`] and differentiated with [`Graph::backward`].

mod element;
mod error;
pub mod finite_diff;
mod graph;
mod init;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Var};
pub use init::{he_normal, normal};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamGrads, ParamSet};
pub use tensor::Tensor;
