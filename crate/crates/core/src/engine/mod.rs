//! Reverse-mode differentiation engine with the layer set of the age
//! regression network: convolution (2D/3D), batch normalization, ReLU, max
//! pooling, a fully-connected layer, weighted MAE, an L2 penalty and Adam.

mod adam;
pub mod conv;
mod graph;
pub mod ops;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{BatchStats, Gradients, Graph, NodeId};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("non-finite gradient in parameter `{name}`")]
    NonFinite { name: String },
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether the L2 penalty applies (convolution and fully-connected weights).
    pub regularized: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, regularized: bool) -> Self {
        Self { name: name.into(), tensor, regularized }
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter { name: self.name.clone(), tensor: self.tensor.cast(), regularized: self.regularized }
    }
}
