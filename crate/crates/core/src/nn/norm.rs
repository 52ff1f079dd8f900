//! Layer and group normalization.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3, Axis};

pub const NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain/bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>, // (n, d) x-hat
    inv_std: Array1<f64>,    // per row
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LayerNormCache)> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(
                "layer_norm",
                format!("width {} != {}", x.ncols(), self.dim()),
            ));
        }
        let n = x.nrows();
        let d = x.ncols() as f64;
        let mut normalized = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = istd;
            for (j, v) in row.iter().enumerate() {
                normalized[(i, j)] = (v - mean) * istd;
            }
        }
        let y = &normalized * &self.gain + &self.bias;
        Ok((
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Result<(Array1<f64>, LayerNormCache)> {
        let x2 = x.view().insert_axis(Axis(0)).to_owned();
        let (y, cache) = self.forward(&x2)?;
        Ok((y.index_axis(Axis(0), 0).to_owned(), cache))
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grads: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grads.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grads.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dxhat: Vec<f64> = (0..dy.ncols())
                .map(|j| dy[(i, j)] * self.gain[j])
                .collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat = dxhat
                .iter()
                .enumerate()
                .map(|(j, v)| v * cache.normalized[(i, j)])
                .sum::<f64>()
                / d;
            for j in 0..dy.ncols() {
                dx[(i, j)] = cache.inv_std[i]
                    * (dxhat[j] - mean_dxhat - cache.normalized[(i, j)] * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn backward_vec(
        &self,
        cache: &LayerNormCache,
        dy: &Array1<f64>,
        grads: &mut LayerNorm,
    ) -> Array1<f64> {
        let dy2 = dy.view().insert_axis(Axis(0)).to_owned();
        let dx = self.backward(cache, &dy2, grads);
        dx.index_axis(Axis(0), 0).to_owned()
    }
}

/// Group normalization over `(channels, h, w)` feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub gain: Array1<f64>, // per channel
    pub bias: Array1<f64>,
    pub groups: usize,
}

pub struct GroupNormCache {
    normalized: Array3<f64>,
    inv_std: Vec<f64>, // per group
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            gain: Array1::ones(channels),
            bias: Array1::zeros(channels),
            groups,
        }
    }

    pub fn zeros_like(&self) -> Self {
        GroupNorm {
            gain: Array1::zeros(self.gain.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            groups: self.groups,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, GroupNormCache)> {
        let (c, h, w) = x.dim();
        if c != self.gain.len() {
            return Err(Error::shape(
                "group_norm",
                format!("channels {} != {}", c, self.gain.len()),
            ));
        }
        let per_group = c / self.groups;
        let group_size = (per_group * h * w) as f64;
        let mut normalized = Array3::zeros(x.raw_dim());
        let mut inv_std = vec![0.0; self.groups];
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            let slice = x.slice(ndarray::s![range.clone(), .., ..]);
            let mean = slice.sum() / group_size;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_size;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[g] = istd;
            let mut out_slice = normalized.slice_mut(ndarray::s![range, .., ..]);
            out_slice.zip_mut_with(&slice, |o, &v| *o = (v - mean) * istd);
        }
        let mut y = normalized.clone();
        for ch in 0..c {
            let mut plane = y.index_axis_mut(Axis(0), ch);
            plane.mapv_inplace(|v| v * self.gain[ch]);
            plane += self.bias[ch];
        }
        Ok((
            y,
            GroupNormCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache,
        dy: &Array3<f64>,
        grads: &mut GroupNorm,
    ) -> Array3<f64> {
        let (c, h, w) = dy.dim();
        let per_group = c / self.groups;
        let group_size = (per_group * h * w) as f64;
        for ch in 0..c {
            let dy_plane = dy.index_axis(Axis(0), ch);
            let xhat_plane = cache.normalized.index_axis(Axis(0), ch);
            grads.gain[ch] += (&dy_plane * &xhat_plane).sum();
            grads.bias[ch] += dy_plane.sum();
        }
        let mut dx = Array3::zeros(dy.raw_dim());
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            // dxhat = dy * gain (per channel)
            let mut dxhat = dy.slice(ndarray::s![range.clone(), .., ..]).to_owned();
            for (local_ch, ch) in range.clone().enumerate() {
                dxhat
                    .index_axis_mut(Axis(0), local_ch)
                    .mapv_inplace(|v| v * self.gain[ch]);
            }
            let xhat = cache.normalized.slice(ndarray::s![range.clone(), .., ..]);
            let mean_dxhat = dxhat.sum() / group_size;
            let mean_dxhat_xhat = (&dxhat * &xhat).sum() / group_size;
            let istd = cache.inv_std[g];
            let mut dx_slice = dx.slice_mut(ndarray::s![range, .., ..]);
            ndarray::Zip::from(&mut dx_slice)
                .and(&dxhat)
                .and(&xhat)
                .for_each(|d, &dh, &xh| {
                    *d = istd * (dh - mean_dxhat - xh * mean_dxhat_xhat);
                });
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_fn_grad, GradCheckCfg};
    use crate::nn::init::normal;
    use crate::rng::rng_from_seed;

    #[test]
    fn layer_norm_unit_stats_with_default_params() {
        let ln = LayerNorm::new(8);
        let mut rng = rng_from_seed(2);
        let x = normal(&mut rng, (3, 8), 2.5);
        let (y, _) = ln.forward(&x).unwrap();
        for row in y.outer_iter() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn layer_norm_zero_input_yields_bias() {
        let mut ln = LayerNorm::new(4);
        ln.bias = Array1::from(vec![0.5, -0.5, 1.0, 0.0]);
        let (y, _) = ln.forward_vec(&Array1::zeros(4)).unwrap();
        assert_eq!(y, ln.bias);
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = rng_from_seed(4);
        let mut ln = LayerNorm::new(5);
        ln.gain = normal(&mut rng, 5, 0.5).mapv(|v| 1.0 + v);
        ln.bias = normal(&mut rng, 5, 0.5);
        let x = normal(&mut rng, (2, 5), 1.3);
        let probe = normal(&mut rng, (2, 5), 1.0);

        let pack = |l: &LayerNorm, x: &Array2<f64>| {
            let mut v: Vec<f64> = l.gain.iter().copied().collect();
            v.extend(l.bias.iter());
            v.extend(x.iter());
            v
        };
        let x0 = pack(&ln, &x);
        let f = |v: &[f64]| {
            let l = LayerNorm {
                gain: Array1::from(v[..5].to_vec()),
                bias: Array1::from(v[5..10].to_vec()),
            };
            let input = Array2::from_shape_vec((2, 5), v[10..].to_vec()).unwrap();
            let (y, _) = l.forward(&input).unwrap();
            (&y * &probe).sum()
        };
        let (_, cache) = ln.forward(&x).unwrap();
        let mut grads = ln.zeros_like();
        let dx = ln.backward(&cache, &probe, &mut grads);
        let analytic = pack(&grads, &dx);
        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn group_norm_grads_match_finite_differences() {
        let mut rng = rng_from_seed(6);
        let mut gn = GroupNorm::new(4, 2);
        gn.gain = normal(&mut rng, 4, 0.3).mapv(|v| 1.0 + v);
        gn.bias = normal(&mut rng, 4, 0.3);
        let x = normal(&mut rng, (4, 3, 3), 1.0);
        let probe = normal(&mut rng, (4, 3, 3), 1.0);

        let pack = |g: &GroupNorm, x: &Array3<f64>| {
            let mut v: Vec<f64> = g.gain.iter().copied().collect();
            v.extend(g.bias.iter());
            v.extend(x.iter());
            v
        };
        let x0 = pack(&gn, &x);
        let f = |v: &[f64]| {
            let g = GroupNorm {
                gain: Array1::from(v[..4].to_vec()),
                bias: Array1::from(v[4..8].to_vec()),
                groups: 2,
            };
            let input = Array3::from_shape_vec((4, 3, 3), v[8..].to_vec()).unwrap();
            let (y, _) = g.forward(&input).unwrap();
            (&y * &probe).sum()
        };
        let (_, cache) = gn.forward(&x).unwrap();
        let mut grads = gn.zeros_like();
        let dx = gn.backward(&cache, &probe, &mut grads);
        let analytic = pack(&grads, &dx);
        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let gn = GroupNorm::new(4, 2);
        let mut rng = rng_from_seed(8);
        let x = normal(&mut rng, (4, 4, 4), 3.0);
        let (y, _) = gn.forward(&x).unwrap();
        for g in 0..2 {
            let slice = y.slice(ndarray::s![g * 2..(g + 1) * 2, .., ..]);
            let n = 2.0 * 16.0;
            let mean = slice.sum() / n;
            assert!(mean.abs() < 1e-10, "group {g} mean {mean}");
        }
    }
}
