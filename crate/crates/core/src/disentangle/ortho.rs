//! Orthogonal loss between paired RoI-pooled vectors.
//!
//! Default reading: each row of the pooled matrices is L2-normalized (with a
//! 1e-8 denominator guard), the normalized matrices are multiplied
//! elementwise, and the loss is the mean absolute row sum -- the mean
//! absolute cosine similarity, bounded to [0, 1] and invariant to positive
//! per-row rescaling. A literal elementwise-square reading is kept for
//! ablation.

use ndarray::{Array2, Array4};

use super::pool_proposals;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;

/// Per-proposal aligned features from the DIR/DSR maps and their pooled
/// channel vectors.
#[derive(Debug, Clone)]
pub struct PooledPair {
    pub a_di: Array4<f64>,
    pub a_ds: Array4<f64>,
    pub p_di: Array2<f64>,
    pub p_ds: Array2<f64>,
}

impl PooledPair {
    pub fn new(a_di: Array4<f64>, a_ds: Array4<f64>) -> Result<Self> {
        if a_di.dim() != a_ds.dim() {
            return Err(Error::ShapeMismatch {
                context: "pooled pair",
                expected: a_di.shape().to_vec(),
                got: a_ds.shape().to_vec(),
            });
        }
        let p_di = pool_proposals(&a_di)?;
        let p_ds = pool_proposals(&a_ds)?;
        Ok(Self {
            a_di,
            a_ds,
            p_di,
            p_ds,
        })
    }

    pub fn n_proposals(&self) -> usize {
        self.a_di.dim().0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoMode {
    /// Row-normalized elementwise product; mean absolute cosine similarity.
    NormalizedCosine,
    /// Elementwise squares without normalization (ablation).
    LiteralSquare,
}

/// Orthogonal loss over pooled rows. Returns the loss and its gradients with
/// respect to both pooled matrices.
pub fn orthogonal_loss(
    p_di: &Array2<f64>,
    p_ds: &Array2<f64>,
    mode: OrthoMode,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if p_di.dim() != p_ds.dim() {
        return Err(Error::ShapeMismatch {
            context: "orthogonal loss",
            expected: p_di.shape().to_vec(),
            got: p_ds.shape().to_vec(),
        });
    }
    let (n, c) = p_di.dim();
    if n == 0 {
        return Err(Error::InvalidInput(
            "orthogonal loss over zero proposals".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let mut gp = Array2::zeros((n, c));
    let mut gq = Array2::zeros((n, c));
    let mut loss = 0.0;

    match mode {
        OrthoMode::NormalizedCosine => {
            for i in 0..n {
                let p = p_di.row(i);
                let q = p_ds.row(i);
                let rp = p.dot(&p).sqrt();
                let rq = q.dot(&q).sqrt();
                let dp = rp + NORM_EPS;
                let dq = rq + NORM_EPS;
                let s = p.dot(&q) / (dp * dq);
                loss += s.abs() * inv_n;
                let sign = if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if sign == 0.0 {
                    continue;
                }
                let coef = sign * inv_n;
                // d|s|/dp = sign * [ q/(dp*dq) - p * (p.q) / (rp * dp^2 * dq) ]
                let pq = p.dot(&q);
                for j in 0..c {
                    let mut g = q[j] / (dp * dq);
                    if rp > 0.0 {
                        g -= p[j] * pq / (rp * dp * dp * dq);
                    }
                    gp[[i, j]] += coef * g;
                    let mut h = p[j] / (dp * dq);
                    if rq > 0.0 {
                        h -= q[j] * pq / (rq * dq * dq * dp);
                    }
                    gq[[i, j]] += coef * h;
                }
            }
        }
        OrthoMode::LiteralSquare => {
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..c {
                    row_sum += p_di[[i, j]] * p_di[[i, j]] * p_ds[[i, j]] * p_ds[[i, j]];
                }
                loss += row_sum.abs() * inv_n;
                let sign = if row_sum >= 0.0 { 1.0 } else { -1.0 };
                let coef = sign * inv_n;
                for j in 0..c {
                    let (p, q) = (p_di[[i, j]], p_ds[[i, j]]);
                    gp[[i, j]] += coef * 2.0 * p * q * q;
                    gq[[i, j]] += coef * 2.0 * q * p * p;
                }
            }
        }
    }

    Ok((loss, gp, gq))
}
