use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::Param;
use crate::error::{Error, Result};

/// 2-D convolution over a single image, `(c_in, h, w) -> (c_out, h_out, w_out)`,
/// computed as im2col followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

/// Per-call state required by [`Conv2d::backward`].
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Self {
            w: Param::kaiming(format!("{name}.w"), &[c_out, c_in, k, k], fan_in, rng),
            b: Param::zeros(format!("{name}.b"), &[c_out]),
            stride,
            pad,
            c_in,
            c_out,
            k,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn w_mat(&self) -> ArrayView2<'_, f64> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("weight is contiguous")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Conv2dCache)> {
        let (c, h, w) = x.dim();
        if c != self.c_in {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels",
                expected: vec![self.c_in],
                got: vec![c],
            });
        }
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
        // (ho*wo, c_out)
        let y_mat = cols.dot(&self.w_mat().t());
        let mut y = Array3::zeros((self.c_out, ho, wo));
        for co in 0..self.c_out {
            let bias = self.b.value[co];
            let mut chan = y.index_axis_mut(Axis(0), co);
            let col = y_mat.column(co);
            for (dst, src) in chan.iter_mut().zip(col.iter()) {
                *dst = src + bias;
            }
        }
        Ok((
            y,
            Conv2dCache {
                cols,
                in_dims: (c, h, w),
            },
        ))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache, gy: &Array3<f64>) -> Array3<f64> {
        let (_, ho, wo) = gy.dim();
        let n_pos = ho * wo;
        // (n_pos, c_out) view of gy
        let mut gy_mat = Array2::zeros((n_pos, self.c_out));
        for co in 0..self.c_out {
            let chan = gy.index_axis(Axis(0), co);
            for (i, v) in chan.iter().enumerate() {
                gy_mat[[i, co]] = *v;
            }
        }

        let gw_mat = gy_mat.t().dot(&cache.cols);
        {
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
                .expect("grad is contiguous");
            gw += &gw_mat;
        }
        for co in 0..self.c_out {
            self.b.grad[co] += gy_mat.column(co).sum();
        }

        let gcols = gy_mat.dot(&self.w_mat());
        col2im(
            &gcols,
            cache.in_dims,
            self.k,
            self.stride,
            self.pad,
            ho,
            wo,
        )
    }
}

/// Unfold `x` into a `(h_out*w_out, c_in*k*k)` matrix of receptive fields.
fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((ho * wo, c_in * k * k));
    for ci in 0..c_in {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let col_idx = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row_base + ox, col_idx]] = plane[[iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the unfolded gradient back onto the input layout.
fn col2im(
    gcols: &Array2<f64>,
    in_dims: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let (c_in, h, w) = in_dims;
    let mut gx = Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        let mut plane = gx.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let col_idx = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[[iy as usize, ix as usize]] += gcols[[row_base + ox, col_idx]];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::rng::rng_from_seed;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = rng_from_seed(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_follows_stride_arithmetic() {
        let mut rng = rng_from_seed(0);
        let conv = Conv2d::new("c", 3, 8, 3, 2, 1, &mut rng);
        let x = random_image(3, 16, 16, 1);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.dim(), (8, 8, 8));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = rng_from_seed(0);
        let conv = Conv2d::new("c", 3, 8, 3, 1, 1, &mut rng);
        let x = random_image(4, 8, 8, 1);
        assert!(conv.forward(&x).is_err());
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let mut rng = rng_from_seed(3);
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random_image(2, 7, 6, 4);
        let (y, _) = conv.forward(&x).unwrap();

        let w = conv
            .w
            .value
            .view()
            .into_shape_with_order((3, 2, 3, 3))
            .unwrap();
        let (ho, wo) = conv.out_hw(7, 6);
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.b.value[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                    acc += w[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[co, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(5);
        let mut conv = Conv2d::new("c", 2, 4, 3, 2, 1, &mut rng);
        let x = random_image(2, 9, 9, 6);
        // random linear readout so every output element matters
        let mut rr = rng_from_seed(7);
        let (y0, cache) = conv.forward(&x).unwrap();
        let r = Array3::from_shape_fn(y0.dim(), |_| rr.gen_range(-1.0..1.0));

        conv.w.zero_grad();
        conv.b.zero_grad();
        let gx = conv.backward(&cache, &r);

        // input gradient
        let fx = |xv: &ArrayD<f64>| {
            let x3 = xv.view().into_shape_with_order(x.dim()).unwrap().to_owned();
            let (y, _) = conv.forward(&x3).unwrap();
            (&y * &r).sum()
        };
        let xd = x.clone().into_dyn();
        let num = central_diff(&fx, &xd, 1e-6, 24, 11);
        let ana: Vec<f64> = num.iter().map(|&(i, _)| gx.as_slice().unwrap()[i]).collect();
        assert!(max_rel_err(&ana, &num) < 1e-7);

        // weight gradient
        let w0 = conv.w.value.clone();
        let fw = |wv: &ArrayD<f64>| {
            let mut c2 = conv.clone();
            c2.w.value = wv.clone();
            let (y, _) = c2.forward(&x).unwrap();
            (&y * &r).sum()
        };
        let numw = central_diff(&fw, &w0, 1e-6, 24, 13);
        let anaw: Vec<f64> = numw
            .iter()
            .map(|&(i, _)| conv.w.grad.as_slice().unwrap()[i])
            .collect();
        assert!(max_rel_err(&anaw, &numw) < 1e-7);

        // bias gradient
        let b0 = conv.b.value.clone();
        let fb = |bv: &ArrayD<f64>| {
            let mut c2 = conv.clone();
            c2.b.value = bv.clone();
            let (y, _) = c2.forward(&x).unwrap();
            (&y * &r).sum()
        };
        let numb = central_diff(&fb, &b0, 1e-6, 4, 17);
        let anab: Vec<f64> = numb
            .iter()
            .map(|&(i, _)| conv.b.grad.as_slice().unwrap()[i])
            .collect();
        assert!(max_rel_err(&anab, &numb) < 1e-7);
        let _ = IxDyn(&[]);
    }
}
