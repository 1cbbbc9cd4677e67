use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::Param;

/// Fully connected layer, `(n, in) -> (n, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    n_in: usize,
    n_out: usize,
}

impl Linear {
    pub fn new(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::kaiming(format!("{name}.w"), &[n_out, n_in], n_in, rng),
            b: Param::zeros(format!("{name}.b"), &[n_out]),
            n_in,
            n_out,
        }
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.n_out, self.n_in))
            .expect("weight is contiguous")
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w2().t());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b.value[j];
            }
        }
        y
    }

    /// `x` must be the forward input. Accumulates parameter gradients and
    /// returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        {
            let gw_new = gy.t().dot(x);
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.n_out, self.n_in))
                .expect("grad is contiguous");
            gw += &gw_new;
        }
        for j in 0..self.n_out {
            self.b.grad[j] += gy.column(j).sum();
        }
        gy.dot(&self.w2())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::rng::rng_from_seed;
    use ndarray::ArrayD;
    use rand::Rng;

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = rng_from_seed(2);
        let lin = Linear::new("l", 3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let y = lin.forward(&x);
        let w = lin.w2();
        for i in 0..4 {
            for o in 0..2 {
                let mut acc = lin.b.value[o];
                for j in 0..3 {
                    acc += x[[i, j]] * w[[o, j]];
                }
                assert!((acc - y[[i, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(9);
        let mut lin = Linear::new("l", 5, 3, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));

        let gx = lin.backward(&x, &r);

        let fx = |xv: &ArrayD<f64>| {
            let x2 = xv.view().into_shape_with_order((4, 5)).unwrap().to_owned();
            (&lin.forward(&x2) * &r).sum()
        };
        let num = central_diff(&fx, &x.clone().into_dyn(), 1e-6, 12, 5);
        let ana: Vec<f64> = num.iter().map(|&(i, _)| gx.as_slice().unwrap()[i]).collect();
        assert!(max_rel_err(&ana, &num) < 1e-8);

        let fw = |wv: &ArrayD<f64>| {
            let mut l2 = lin.clone();
            l2.w.value = wv.clone();
            (&l2.forward(&x) * &r).sum()
        };
        let num_w = central_diff(&fw, &lin.w.value, 1e-6, 12, 6);
        let ana_w: Vec<f64> = num_w
            .iter()
            .map(|&(i, _)| lin.w.grad.as_slice().unwrap()[i])
            .collect();
        assert!(max_rel_err(&ana_w, &num_w) < 1e-8);
    }
}
