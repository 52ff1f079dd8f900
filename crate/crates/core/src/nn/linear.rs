//! Dense affine layer over row-major batches.

use crate::error::{Error, Result};
use crate::nn::init::xavier_uniform;
use crate::rng::Rng;
use ndarray::{Array1, Array2, Axis};

/// `y = x W^T + b` applied row-wise: input `(n, in)`, output `(n, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>, // (out, in)
    pub bias: Array1<f64>,   // (out)
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LinearCache)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(
                "linear",
                format!("input width {} != expected {}", x.ncols(), self.in_dim()),
            ));
        }
        let y = x.dot(&self.weight.t()) + &self.bias;
        Ok((y, LinearCache { input: x.clone() }))
    }

    /// Convenience for a single vector input.
    pub fn forward_vec(&self, x: &Array1<f64>) -> Result<(Array1<f64>, LinearCache)> {
        let x2 = x.view().insert_axis(Axis(0)).to_owned();
        let (y, cache) = self.forward(&x2)?;
        Ok((y.index_axis(Axis(0), 0).to_owned(), cache))
    }

    /// Accumulates parameter grads into `grads` and returns the input grad.
    pub fn backward(
        &self,
        cache: &LinearCache,
        dy: &Array2<f64>,
        grads: &mut Linear,
    ) -> Array2<f64> {
        grads.weight += &dy.t().dot(&cache.input);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn backward_vec(
        &self,
        cache: &LinearCache,
        dy: &Array1<f64>,
        grads: &mut Linear,
    ) -> Array1<f64> {
        let dy2 = dy.view().insert_axis(Axis(0)).to_owned();
        let dx = self.backward(cache, &dy2, grads);
        dx.index_axis(Axis(0), 0).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_fn_grad, GradCheckCfg};
    use crate::rng::rng_from_seed;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_computation() {
        let layer = Linear {
            weight: array![[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]],
            bias: array![0.1, 0.2, 0.3],
        };
        let x = array![[1.0, 1.0]];
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y, array![[3.1, -0.8, 1.3]]);
    }

    #[test]
    fn rejects_width_mismatch() {
        let mut rng = rng_from_seed(0);
        let layer = Linear::new(&mut rng, 4, 2);
        assert!(layer.forward(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = rng_from_seed(9);
        let layer = Linear::new(&mut rng, 3, 2);
        let x = array![[0.4, -0.6, 1.1], [0.2, 0.9, -1.3]];
        let probe = array![[1.0, -2.0], [0.5, 0.25]];

        // Flat vector: weights, bias, then input.
        let pack = |l: &Linear, x: &Array2<f64>| {
            let mut v: Vec<f64> = l.weight.iter().copied().collect();
            v.extend(l.bias.iter());
            v.extend(x.iter());
            v
        };
        let x0 = pack(&layer, &x);
        let f = |v: &[f64]| {
            let weight = Array2::from_shape_vec((2, 3), v[0..6].to_vec()).unwrap();
            let bias = Array1::from(v[6..8].to_vec());
            let input = Array2::from_shape_vec((2, 3), v[8..14].to_vec()).unwrap();
            let (y, _) = Linear { weight, bias }.forward(&input).unwrap();
            (&y * &probe).sum()
        };

        let (_, cache) = layer.forward(&x).unwrap();
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &probe, &mut grads);
        let analytic = pack(&grads, &dx);

        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-7, "max rel err {err}");
    }
}
