//! 2D convolution on single images, im2col + GEMM.

use crate::error::{Error, Result};
use crate::nn::init::xavier_uniform;
use crate::rng::Rng;
use ndarray::{Array1, Array2, Array3, Array4, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>, // (out_c, in_c, k, k)
    pub bias: Array1<f64>,   // (out_c)
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCache {
    cols: Array2<f64>, // (in_c*k*k, out_h*out_w)
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        rng: &mut Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        Conv2d {
            weight: xavier_uniform(rng, (out_c, in_c, kernel, kernel), fan_in, fan_out),
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Conv2dCache)> {
        let (in_c, h, w) = x.dim();
        let [out_c, w_in_c, k, _] = *self.weight.shape() else {
            unreachable!()
        };
        if in_c != w_in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {in_c} != weight channels {w_in_c}"),
            ));
        }
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {k}"),
            ));
        }
        let (out_h, out_w) = self.out_spatial(h, w);
        let cols = im2col(x, k, self.stride, self.padding, out_h, out_w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let mut out2 = w2.dot(&cols);
        for (mut row, b) in out2.outer_iter_mut().zip(self.bias.iter()) {
            row += *b;
        }
        let out = out2
            .into_shape_with_order((out_c, out_h, out_w))
            .expect("conv output shape");
        Ok((
            out,
            Conv2dCache {
                cols,
                in_shape: (in_c, h, w),
                out_hw: (out_h, out_w),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array3<f64>,
        grads: &mut Conv2d,
    ) -> Array3<f64> {
        let [out_c, in_c, k, _] = *self.weight.shape() else {
            unreachable!()
        };
        let (out_h, out_w) = cache.out_hw;
        let dy2 = dy
            .view()
            .into_shape_with_order((out_c, out_h * out_w))
            .expect("contiguous dy");
        let dw2 = dy2.dot(&cache.cols.t());
        grads.weight += &dw2
            .into_shape_with_order((out_c, in_c, k, k))
            .expect("weight grad shape");
        grads.bias += &dy2.sum_axis(Axis(1));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let dcols = w2.t().dot(&dy2);
        col2im(
            &dcols,
            cache.in_shape,
            k,
            self.stride,
            self.padding,
            out_h,
            out_w,
        )
    }
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (in_c, h, w) = x.dim();
    let mut cols = Array2::zeros((in_c * k * k, out_h * out_w));
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut cols_row = cols.row_mut(row);
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_row[oy * out_w + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let (in_c, h, w) = in_shape;
    let mut dx = Array3::zeros((in_c, h, w));
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dcols_row = dcols.row(row);
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += dcols_row[oy * out_w + ox];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_fn_grad, GradCheckCfg};
    use crate::rng::rng_from_seed;

    /// Naive direct convolution, the independent oracle for the im2col path.
    fn conv_naive(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x.dim();
        let [out_c, _, k, _] = *conv.weight.shape() else {
            unreachable!()
        };
        let (out_h, out_w) = conv.out_spatial(h, w);
        let mut out = Array3::zeros((out_c, out_h, out_w));
        for oc in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = conv.bias[oc];
                    for ic in 0..in_c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += conv.weight[(oc, ic, ki, kj)]
                                        * x[(ic, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    out[(oc, oy, ox)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = rng_from_seed(21);
        let conv = Conv2d::new(&mut rng, 3, 4, 3, 2, 1);
        let x = crate::nn::init::normal(&mut rng, (3, 9, 7), 1.0);
        let (y, _) = conv.forward(&x).unwrap();
        let oracle = conv_naive(&conv, &x);
        assert_eq!(y.dim(), oracle.dim());
        let max_diff = (&y - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn strided_output_shape() {
        let mut rng = rng_from_seed(1);
        let conv = Conv2d::new(&mut rng, 3, 16, 3, 2, 1);
        let x = Array3::zeros((3, 64, 64));
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.dim(), (16, 32, 32));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = rng_from_seed(1);
        let conv = Conv2d::new(&mut rng, 3, 4, 3, 1, 1);
        assert!(conv.forward(&Array3::zeros((2, 8, 8))).is_err());
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = rng_from_seed(77);
        let conv = Conv2d::new(&mut rng, 2, 3, 3, 2, 1);
        let x = crate::nn::init::normal(&mut rng, (2, 5, 5), 1.0);
        let probe = crate::nn::init::normal(&mut rng, (3, 3, 3), 1.0);

        let n_w = conv.weight.len();
        let n_b = conv.bias.len();
        let pack = |c: &Conv2d, x: &Array3<f64>| {
            let mut v: Vec<f64> = c.weight.iter().copied().collect();
            v.extend(c.bias.iter());
            v.extend(x.iter());
            v
        };
        let x0 = pack(&conv, &x);
        let f = |v: &[f64]| {
            let weight = Array4::from_shape_vec((3, 2, 3, 3), v[..n_w].to_vec()).unwrap();
            let bias = Array1::from(v[n_w..n_w + n_b].to_vec());
            let input = Array3::from_shape_vec((2, 5, 5), v[n_w + n_b..].to_vec()).unwrap();
            let c = Conv2d {
                weight,
                bias,
                stride: 2,
                padding: 1,
            };
            let (y, _) = c.forward(&input).unwrap();
            (&y * &probe).sum()
        };

        let (_, cache) = conv.forward(&x).unwrap();
        let mut grads = conv.zeros_like();
        let dx = conv.backward(&cache, &probe, &mut grads);
        let analytic = pack(&grads, &dx);
        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-7, "max rel err {err}");
    }
}
