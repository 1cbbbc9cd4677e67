//! Vector-decomposed disentanglement: the DIR extractor, difference
//! decomposition, domain classifier with optional gradient reversal, and the
//! orthogonal loss over RoI-pooled feature pairs.

mod dir;
mod domain;
mod ortho;

pub use dir::{DirCache, DirExtractor};
pub use domain::{
    domain_loss, domain_loss_grad, DomainClassifier, DomainClassifierCache, DomainPrediction,
};
pub use ortho::{orthogonal_loss, OrthoMode, PooledPair};

use ndarray::{Array2, Array3, Array4, Axis, Dimension};

use crate::error::{Error, Result};

/// Gradient reversal, forward side: bitwise identity.
pub fn grl_forward<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.clone()
}

/// Gradient reversal, backward side: upstream gradient scaled by `-lambda`.
pub fn grl_backward<D: Dimension>(
    g: &ndarray::Array<f64, D>,
    lambda: f64,
) -> ndarray::Array<f64, D> {
    g.mapv(|v| -lambda * v)
}

/// Difference decomposition `f_ds = f_b - f_di`.
pub fn difference_decompose(f_b: &Array3<f64>, f_di: &Array3<f64>) -> Result<Array3<f64>> {
    if f_b.dim() != f_di.dim() {
        return Err(Error::ShapeMismatch {
            context: "difference decomposition",
            expected: f_b.shape().to_vec(),
            got: f_di.shape().to_vec(),
        });
    }
    Ok(f_b - f_di)
}

/// Per-proposal global average pooling `(n, c, h, w) -> (n, c)`.
pub fn pool_proposals(a: &Array4<f64>) -> Result<Array2<f64>> {
    let (n, c, h, w) = a.dim();
    if n == 0 {
        return Err(Error::InvalidInput(
            "pooling requested over zero proposals".into(),
        ));
    }
    let scale = 1.0 / (h * w) as f64;
    let mut p = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            p[[i, j]] = a.index_axis(Axis(0), i).index_axis(Axis(0), j).sum() * scale;
        }
    }
    Ok(p)
}

/// Backward of [`pool_proposals`].
pub fn pool_proposals_backward(g: &Array2<f64>, hw: (usize, usize)) -> Array4<f64> {
    let (n, c) = g.dim();
    let (h, w) = hw;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| g[[i, j]] * scale)
}
