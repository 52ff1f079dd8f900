//! Numerically stable softmax over 1D slices.

use ndarray::Array1;

/// Softmax with max-subtraction; output sums to 1 for any finite input.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Backward of softmax given the forward *output* `y`:
/// `dx_i = y_i * (dy_i - sum_j dy_j y_j)`.
pub fn softmax_backward(y: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    let dot = y.dot(dy);
    let mut dx = dy - dot;
    dx *= y;
    dx
}
