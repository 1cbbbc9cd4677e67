//! Activation and loss kernels shared by the detector and the
//! disentanglement heads. Each loss returns the scalar together with its
//! gradient so callers never re-derive formulas.

use ndarray::{Array1, Array2, Array3, Dimension};

/// Logits are clamped to this magnitude before any sigmoid so that log losses
/// stay finite.
pub const LOGIT_CLAMP: f64 = 15.0;

pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward through ReLU given the forward *output* (zero where inactive).
pub fn relu_backward<D: Dimension>(
    y: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Spatial mean per channel: `(c, h, w) -> (c,)`.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array1::from_iter((0..c).map(|ci| x.index_axis(ndarray::Axis(0), ci).sum() * scale))
}

pub fn global_avg_pool_backward(g: &Array1<f64>, hw: (usize, usize)) -> Array3<f64> {
    let (h, w) = hw;
    let scale = 1.0 / (h * w) as f64;
    let c = g.len();
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[ci] * scale)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a raw logit.
/// Returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - target)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean cross-entropy over rows against integer targets.
/// Returns `(loss, dloss/dlogits)`.
pub fn cross_entropy_mean(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len());
    assert!(n > 0, "cross entropy over zero rows");
    let p = softmax_rows(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= p[[i, t]].max(f64::MIN_POSITIVE).ln();
        grad[[i, t]] -= 1.0;
    }
    grad.mapv_inplace(|g| g * inv_n);
    (loss * inv_n, grad)
}

/// Smooth-L1 (Huber with transition 1.0) of a residual.
/// Returns `(loss, dloss/dresidual)`.
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}
