//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its value and the inputs its adjoint needs; [`Graph::backward`]
//! then sweeps the nodes in reverse insertion order.

mod graph;
mod mlp;
mod tensor;

pub use graph::{Gradients, Graph, Primitive, Var};
pub use mlp::{
    mlp_forward, per_point_linear, xavier_uniform, Ctx, LinearLayer, MlpParams, ParamId, ParamSet,
    DEFAULT_LEAKY_SLOPE,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
