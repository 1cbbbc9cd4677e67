use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::nn::ops::{self, LOGIT_CLAMP};
use crate::nn::{Linear, Param};

use super::{grl_backward, grl_forward};

/// Outcome of domain classification for one image.
#[derive(Debug, Clone, Copy)]
pub struct DomainPrediction {
    /// Sigmoid of the clamped logit, strictly inside (0, 1).
    pub d_hat: f64,
    /// Ground-truth domain: 0 = source, 1 = target.
    pub domain: u8,
    raw_logit: f64,
}

impl DomainPrediction {
    pub fn new(raw_logit: f64, domain: u8) -> Self {
        let clamped = raw_logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        Self {
            d_hat: ops::sigmoid(clamped),
            domain,
            raw_logit,
        }
    }
}

/// Binary cross-entropy of the prediction; finite by the logit clamp.
pub fn domain_loss(pred: &DomainPrediction) -> f64 {
    let d = pred.domain as f64;
    -(d * pred.d_hat.ln() + (1.0 - d) * (1.0 - pred.d_hat).ln())
}

/// d(loss)/d(raw logit); zero where the clamp is active.
pub fn domain_loss_grad(pred: &DomainPrediction) -> f64 {
    if pred.raw_logit.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        pred.d_hat - pred.domain as f64
    }
}

/// Domain classifier over the domain-specific map: global average pool to a
/// channel vector, then three FC layers (c -> c -> c -> 1). An optional
/// gradient reversal sits between the feature map and the pool.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    grl_lambda: Option<f64>,
}

pub struct DomainClassifierCache {
    hw: (usize, usize),
    pooled: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl DomainClassifier {
    pub fn new(channels: usize, grl_lambda: Option<f64>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new("domain_classifier.fc1", channels, channels, rng),
            fc2: Linear::new("domain_classifier.fc2", channels, channels, rng),
            fc3: Linear::new("domain_classifier.fc3", channels, 1, rng),
            grl_lambda,
        }
    }

    pub fn grl_lambda(&self) -> Option<f64> {
        self.grl_lambda
    }

    /// Classify one feature map; `domain` is the ground-truth label carried
    /// into the returned prediction.
    pub fn forward(
        &self,
        f_ds: &Array3<f64>,
        domain: u8,
    ) -> (DomainPrediction, DomainClassifierCache) {
        let (_, h, w) = f_ds.dim();
        let fed = if self.grl_lambda.is_some() {
            grl_forward(f_ds)
        } else {
            f_ds.clone()
        };
        let pooled_vec = ops::global_avg_pool(&fed);
        let c = pooled_vec.len();
        let pooled = pooled_vec.into_shape_with_order((1, c)).expect("1 x c");
        let h1 = ops::relu(&self.fc1.forward(&pooled));
        let h2 = ops::relu(&self.fc2.forward(&h1));
        let logit = self.fc3.forward(&h2)[[0, 0]];
        (
            DomainPrediction::new(logit, domain),
            DomainClassifierCache {
                hw: (h, w),
                pooled,
                h1,
                h2,
            },
        )
    }

    /// Backward from d(loss)/d(logit) to the feature-map gradient,
    /// accumulating parameter gradients; applies the gradient reversal if
    /// configured.
    pub fn backward(&mut self, cache: &DomainClassifierCache, g_logit: f64) -> Array3<f64> {
        let g3 = Array2::from_elem((1, 1), g_logit);
        let gh2 = self.fc3.backward(&cache.h2, &g3);
        let gh2 = ops::relu_backward(&cache.h2, &gh2);
        let gh1 = self.fc2.backward(&cache.h1, &gh2);
        let gh1 = ops::relu_backward(&cache.h1, &gh1);
        let gpooled = self.fc1.backward(&cache.pooled, &gh1);
        let gvec = gpooled.row(0).to_owned();
        let gmap = ops::global_avg_pool_backward(&gvec, cache.hw);
        match self.grl_lambda {
            Some(lambda) => grl_backward(&gmap, lambda),
            None => gmap,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
            &self.fc3.w,
            &self.fc3.b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.fc3.w,
            &mut self.fc3.b,
        ]
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
    fn prediction_stays_inside_unit_interval() {
        for &z in &[-1e9, -20.0, 0.0, 20.0, 1e9] {
            let p = DomainPrediction::new(z, 0);
            assert!(p.d_hat > 0.0 && p.d_hat < 1.0);
            assert!(domain_loss(&p).is_finite());
        }
    }

    #[test]
    fn zero_parameters_predict_half() {
        let mut rng = rng_from_seed(1);
        let mut clf = DomainClassifier::new(8, None, &mut rng);
        for p in clf.params_mut() {
            p.value.fill(0.0);
        }
        let f = Array3::from_elem((8, 4, 4), 0.3);
        let (pred, _) = clf.forward(&f, 0);
        assert_eq!(pred.d_hat, 0.5);
    }

    #[test]
    fn analytic_loss_values() {
        // D = 0 at d_hat = 0.5 -> ln 2
        let p = DomainPrediction::new(0.0, 0);
        assert!((domain_loss(&p) - 2.0f64.ln()).abs() < 1e-12);
        // D = 1 at d_hat = 0.5 -> ln 2
        let p = DomainPrediction::new(0.0, 1);
        assert!((domain_loss(&p) - 2.0f64.ln()).abs() < 1e-12);
        // D = 1, d_hat = 0.25 -> ln 4; logit = ln(1/3)
        let p = DomainPrediction::new((1.0f64 / 3.0).ln(), 1);
        assert!((p.d_hat - 0.25).abs() < 1e-12);
        assert!((domain_loss(&p) - 4.0f64.ln()).abs() < 1e-12);
        // D = 1, d_hat -> 1: loss -> 0
        let p = DomainPrediction::new(14.9, 1);
        assert!(domain_loss(&p) < 1e-6);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let mut clf = DomainClassifier::new(4, None, &mut rng);
        let f = Array3::from_shape_fn((4, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let (pred, cache) = clf.forward(&f, 1);
        let g = domain_loss_grad(&pred);
        let gf = clf.backward(&cache, g);

        let loss_of = |v: &ArrayD<f64>| {
            let f3 = v.view().into_shape_with_order((4, 3, 3)).unwrap().to_owned();
            let (p, _) = clf.forward(&f3, 1);
            domain_loss(&p)
        };
        let num = central_diff(&loss_of, &f.clone().into_dyn(), 1e-6, 12, 9);
        let ana: Vec<f64> = num.iter().map(|&(i, _)| gf.as_slice().unwrap()[i]).collect();
        assert!(max_rel_err(&ana, &num) < 1e-5);
    }

    #[test]
    fn grl_flips_feature_gradient_only() {
        let mut rng = rng_from_seed(6);
        let plain = DomainClassifier::new(4, None, &mut rng);
        let mut with_grl = plain.clone();
        with_grl.grl_lambda = Some(1.0);
        let mut plain = plain;
        let f = Array3::from_shape_fn((4, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let (pred, cache) = plain.forward(&f, 1);
        let g = domain_loss_grad(&pred);
        let gf_plain = plain.backward(&cache, g);

        let (pred2, cache2) = with_grl.forward(&f, 1);
        let gf_grl = with_grl.backward(&cache2, domain_loss_grad(&pred2));

        assert!(gf_plain
            .iter()
            .zip(gf_grl.iter())
            .all(|(a, b)| (a + b).abs() < 1e-15));
    }
}
