//! Central finite-difference probes for gradient verification.
//!
//! These helpers evaluate the checked function twice per probe and never
//! touch analytic backward code, so they stay an independent oracle for it.

use ndarray::ArrayD;
use rand::Rng;

use crate::rng::rng_from_seed;

/// Central difference of `f` at `x` along `n_probes` randomly chosen flat
/// indices. Returns `(flat_index, df/dx_i)` pairs.
pub fn central_diff(
    f: &impl Fn(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    h: f64,
    n_probes: usize,
    seed: u64,
) -> Vec<(usize, f64)> {
    let mut rng = rng_from_seed(seed);
    let n = x.len();
    assert!(n > 0, "cannot probe an empty array");
    (0..n_probes)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut xp = x.clone();
            let mut xm = x.clone();
            {
                let sp = xp.as_slice_mut().expect("standard layout");
                sp[i] += h;
            }
            {
                let sm = xm.as_slice_mut().expect("standard layout");
                sm[i] -= h;
            }
            (i, (f(&xp) - f(&xm)) / (2.0 * h))
        })
        .collect()
}

/// Max relative error between analytic values and numeric probes; the
/// denominator is floored so near-zero gradients do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[(usize, f64)]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, (_, n))| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_gradient_recovered() {
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let f = |v: &ArrayD<f64>| v.iter().map(|t| t * t).sum::<f64>();
        let probes = central_diff(&f, &x, 1e-6, 8, 3);
        for (i, g) in probes {
            assert!((g - 2.0 * x[[i]]).abs() < 1e-8);
        }
    }
}
