//! Elementwise activations and their backward passes.

use ndarray::{Array, Dimension};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of relu given the forward *input*.
pub fn relu_backward<D: Dimension>(x: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn tanh_forward<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(f64::tanh)
}

/// Backward of tanh given the forward *output*.
pub fn tanh_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| *d *= 1.0 - v * v);
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

/// Backward of the tanh-approximation GELU given the forward *input*.
pub fn gelu_backward<D: Dimension>(x: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let inner = GELU_C * (v + GELU_A * v * v * v);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
    });
    dx
}
