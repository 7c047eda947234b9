//! Dense tensors, reverse-mode differentiation, and the finite-difference oracle.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{analytic_gradients, gradcheck, gradcheck_coords, straddles_kink, Coords};
pub use graph::{inject_backward_fault, Elementwise, Gradients, Graph, Reduce, Var};
pub use tensor::Tensor;

/// Normalized coordinate of pixel `i` along an axis of `n` pixels (corners at ±1).
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    kernels::normalized_coord(i, n)
}

/// The identity sampling grid `[H,W,2]` for [`Graph::bilinear_sample`].
pub fn identity_grid(height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        for j in 0..width {
            data.push(normalized_coord(j, width));
            data.push(normalized_coord(i, height));
        }
    }
    Tensor::from_parts(vec![height, width, 2], data)
}
