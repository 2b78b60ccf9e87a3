//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod check;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{check_gradients, check_parameter_gradients, relative_error};
pub use graph::{
    cosine as cosine_similarity, layernorm_rows, softmax_rows, AttentionLayout, Axis, DiffNode,
    Graph, NodeId, LAYERNORM_EPS,
};
pub use optim::{AdamW, AdamWConfig};
pub(crate) use params::fnv1a;
pub use params::{load_tensors, save_tensors, ParameterStore, TensorEntry, TensorManifest};
pub use tensor::Tensor;

/// Softmax of a single vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor::row(xs)).into_vec()
}

#[cfg(test)]
mod tests;
