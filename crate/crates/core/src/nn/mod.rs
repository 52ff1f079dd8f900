//! Hand-rolled f64 building blocks with explicit forward/backward pairs.
//!
//! Every op returns its forward output together with a cache of whatever the
//! backward pass needs; backward consumes the cache and the upstream gradient
//! and accumulates parameter gradients into a mirror instance of the module
//! (`zeros_like`). Analytic gradients are verified against central finite
//! differences in the test suites.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod softmax;

pub use activation::{gelu, gelu_backward, relu, relu_backward, tanh_backward, tanh_forward};
pub use conv::{Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use norm::{GroupNorm, GroupNormCache, LayerNorm, LayerNormCache};
pub use softmax::{softmax, softmax_backward};

use ndarray::Array1;

/// L2-normalize a vector, with a tiny floor so the zero vector stays finite.
pub fn l2_normalize(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(x).sqrt().max(1e-12);
    (x / norm, norm)
}

/// Backward of [`l2_normalize`]: given the normalized output `y`, the input
/// norm and the upstream gradient, return the gradient w.r.t. the input.
pub fn l2_normalize_backward(y: &Array1<f64>, norm: f64, dy: &Array1<f64>) -> Array1<f64> {
    let proj = y.dot(dy);
    (dy - &(y * proj)) / norm
}
