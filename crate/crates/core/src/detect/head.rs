use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{ops, Linear, Param};

/// RoI classification/regression head: flatten -> two 256-wide FC layers ->
/// class logits `(n, K+1)` and per-class box deltas `(n, 4K)`.
#[derive(Debug, Clone)]
pub struct RoiHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
    num_classes: usize,
    in_dim: usize,
    roi_size: usize,
    channels: usize,
}

pub struct RoiHeadCache {
    x_flat: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl RoiHead {
    pub fn new(channels: usize, roi_size: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let in_dim = channels * roi_size * roi_size;
        Self {
            fc1: Linear::new("roi_head_cls.fc1", in_dim, 256, rng),
            fc2: Linear::new("roi_head_cls.fc2", 256, 256, rng),
            cls: Linear::new("roi_head_cls.out", 256, num_classes + 1, rng),
            reg: Linear::new("roi_head_reg.out", 256, 4 * num_classes, rng),
            num_classes,
            in_dim,
            roi_size,
            channels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, a: &Array4<f64>) -> (Array2<f64>, Array2<f64>, RoiHeadCache) {
        let n = a.dim().0;
        let x_flat = if n == 0 {
            Array2::zeros((0, self.in_dim))
        } else {
            a.to_owned()
                .into_shape_with_order((n, self.in_dim))
                .expect("contiguous pooled features")
        };
        let h1 = ops::relu(&self.fc1.forward(&x_flat));
        let h2 = ops::relu(&self.fc2.forward(&h1));
        let cls_logits = self.cls.forward(&h2);
        let box_deltas = self.reg.forward(&h2);
        (cls_logits, box_deltas, RoiHeadCache { x_flat, h1, h2 })
    }

    pub fn backward(
        &mut self,
        cache: &RoiHeadCache,
        gcls: &Array2<f64>,
        greg: &Array2<f64>,
    ) -> Array4<f64> {
        let n = cache.x_flat.nrows();
        let mut gh2 = self.cls.backward(&cache.h2, gcls);
        gh2 += &self.reg.backward(&cache.h2, greg);
        let gh2 = ops::relu_backward(&cache.h2, &gh2);
        let gh1 = self.fc2.backward(&cache.h1, &gh2);
        let gh1 = ops::relu_backward(&cache.h1, &gh1);
        let gx = self.fc1.backward(&cache.x_flat, &gh1);
        gx.into_shape_with_order((n, self.channels, self.roi_size, self.roi_size))
            .expect("contiguous gradient")
    }

    /// Shared trunk plus the classification output.
    pub fn cls_params(&self) -> Vec<&Param> {
        vec![
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
            &self.cls.w,
            &self.cls.b,
        ]
    }

    pub fn cls_params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.cls.w,
            &mut self.cls.b,
        ]
    }

    pub fn reg_params(&self) -> Vec<&Param> {
        vec![&self.reg.w, &self.reg.b]
    }

    pub fn reg_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.reg.w, &mut self.reg.b]
    }

    /// Simultaneous mutable access to the classification-side and
    /// regression-side parameter lists.
    pub fn split_params_mut(&mut self) -> (Vec<&mut Param>, Vec<&mut Param>) {
        let Self {
            fc1, fc2, cls, reg, ..
        } = self;
        (
            vec![
                &mut fc1.w,
                &mut fc1.b,
                &mut fc2.w,
                &mut fc2.b,
                &mut cls.w,
                &mut cls.b,
            ],
            vec![&mut reg.w, &mut reg.b],
        )
    }
}
