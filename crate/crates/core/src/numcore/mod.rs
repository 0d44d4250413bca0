//! Dense tensors, a define-by-run autodiff graph, and a finite-difference
//! oracle.

mod blob;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use blob::{decode_tensor, encode_tensor, tensor_to_bytes, BLOB_MAGIC, BLOB_VERSION};
pub use gradcheck::{grad_check, numeric_gradient, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::matmul_kernel;

/// Sinusoidal position code: `sin(pos / 10000^(2i/E))` on even columns and
/// the matching cosine on odd columns.
pub fn sinusoidal_positions<T: Scalar>(positions: &[usize], width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * width);
    for &pos in positions {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::raw(vec![positions.len(), width], data)
}
