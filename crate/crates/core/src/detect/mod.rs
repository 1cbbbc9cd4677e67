//! Two-stage detector substrate: boxes, anchors, backbone, RPN, RoI-Align
//! and the detection head with its loss.

mod backbone;
pub mod boxes;
mod head;
pub mod losses;
mod roi_align;
mod rpn;

pub use backbone::{Backbone, BackboneCache};
pub use boxes::{decode_deltas, encode_deltas, generate_anchors, iou, nms, BoxF};
pub use head::{RoiHead, RoiHeadCache};
pub use roi_align::{roi_align, roi_align_backward};
pub use rpn::{label_anchors, AnchorLabel, Rpn, RpnConfig, RpnLossParts, RpnOutput, ANCHOR_SIZES};

use ndarray::Array3;

use crate::error::{Error, Result};

/// The decomposition triple. `f_ds` is always derived as `f_b - f_di`; no
/// code path produces it independently.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub f_b: Array3<f64>,
    pub f_di: Array3<f64>,
    pub f_ds: Array3<f64>,
}

impl FeatureBundle {
    pub fn from_decomposition(f_b: Array3<f64>, f_di: Array3<f64>) -> Result<Self> {
        if f_b.dim() != f_di.dim() {
            return Err(Error::ShapeMismatch {
                context: "feature decomposition",
                expected: f_b.shape().to_vec(),
                got: f_di.shape().to_vec(),
            });
        }
        let f_ds = &f_b - &f_di;
        Ok(Self { f_b, f_di, f_ds })
    }

    /// Max absolute residual of re-deriving `f_ds` from the stored pair;
    /// zero bit-for-bit because subtraction is deterministic.
    pub fn decomposition_residual(&self) -> f64 {
        let mut max = 0.0f64;
        for ((a, b), d) in self
            .f_b
            .iter()
            .zip(self.f_di.iter())
            .zip(self.f_ds.iter())
        {
            let r = ((a - b) - d).abs();
            if r > max {
                max = r;
            }
        }
        max
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn decomposition_residual_is_exactly_zero() {
        let mut rng = rng_from_seed(4);
        let f_b = Array3::from_shape_fn((8, 4, 4), |_| rng.gen_range(-5.0..5.0));
        let f_di = Array3::from_shape_fn((8, 4, 4), |_| rng.gen_range(-5.0..5.0));
        let bundle = FeatureBundle::from_decomposition(f_b, f_di).unwrap();
        assert_eq!(bundle.decomposition_residual(), 0.0);
    }

    #[test]
    fn zero_di_gives_ds_equal_to_fb() {
        let mut rng = rng_from_seed(5);
        let f_b = Array3::from_shape_fn((4, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let bundle =
            FeatureBundle::from_decomposition(f_b.clone(), Array3::zeros((4, 2, 2))).unwrap();
        assert_eq!(bundle.f_ds, f_b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f_b = Array3::zeros((4, 2, 2));
        let f_di = Array3::zeros((4, 2, 3));
        assert!(FeatureBundle::from_decomposition(f_b, f_di).is_err());
    }
}
