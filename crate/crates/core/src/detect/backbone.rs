use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Conv2dCache, Param};

/// Stride-8 convolutional feature extractor: four 3x3 blocks
/// (3 -> 32 -> 48 -> 64 -> 64), stride 2 on the first three, ReLU after each.
#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv2d>,
}

pub struct BackboneCache {
    conv_caches: Vec<Conv2dCache>,
    /// Post-ReLU activation of each block (the last one is the output).
    activations: Vec<Array3<f64>>,
}

impl Backbone {
    pub const OUT_CHANNELS: usize = 64;
    pub const STRIDE: usize = 8;

    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let plan = [(3, 32, 2), (32, 48, 2), (48, 64, 2), (64, 64, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(&format!("backbone_E.conv{i}"), ci, co, 3, s, 1, rng))
            .collect();
        Self { convs }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(Array3<f64>, BackboneCache)> {
        let (c, h, w) = image.dim();
        if c != 3 || h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(Error::ShapeMismatch {
                context: "backbone input (3, 8k, 8k)",
                expected: vec![3, Self::STRIDE, Self::STRIDE],
                got: vec![c, h, w],
            });
        }
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for conv in &self.convs {
            let (pre, cache) = conv.forward(&x)?;
            x = ops::relu(&pre);
            conv_caches.push(cache);
            activations.push(x.clone());
        }
        Ok((
            x,
            BackboneCache {
                conv_caches,
                activations,
            },
        ))
    }

    /// Gradient w.r.t. the input image (rarely needed, but it completes the
    /// chain for finite-difference checks).
    pub fn backward(&mut self, cache: &BackboneCache, gy: &Array3<f64>) -> Array3<f64> {
        let mut g = gy.clone();
        for i in (0..self.convs.len()).rev() {
            g = ops::relu_backward(&cache.activations[i], &g);
            g = self.convs[i].backward(&cache.conv_caches[i], &g);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| [&c.w, &c.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.w, &mut c.b])
            .collect()
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
    fn stride_arithmetic_gives_16x16_for_128() {
        let mut rng = rng_from_seed(0);
        let bb = Backbone::new(&mut rng);
        let x = Array3::zeros((3, 128, 128));
        let (y, _) = bb.forward(&x).unwrap();
        assert_eq!(y.dim(), (64, 16, 16));
    }

    #[test]
    fn zero_input_is_finite() {
        let mut rng = rng_from_seed(1);
        let bb = Backbone::new(&mut rng);
        let x = Array3::zeros((3, 32, 32));
        let (y, _) = bb.forward(&x).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = rng_from_seed(1);
        let bb = Backbone::new(&mut rng);
        assert!(bb.forward(&Array3::zeros((3, 30, 32))).is_err());
        assert!(bb.forward(&Array3::zeros((1, 32, 32))).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(2);
        let mut bb = Backbone::new(&mut rng);
        let mut image_rng = rng_from_seed(3);
        let x = Array3::from_shape_fn((3, 24, 24), |_| image_rng.gen_range(0.0..1.0));
        let (y0, cache) = bb.forward(&x).unwrap();
        let r = Array3::from_shape_fn(y0.dim(), |_| image_rng.gen_range(-1.0..1.0));

        for p in bb.params_mut() {
            p.zero_grad();
        }
        bb.backward(&cache, &r);

        // probe one weight tensor (first conv) against central differences
        let w0 = bb.params()[0].value.clone();
        let bb_ref = bb.clone();
        let f = |wv: &ArrayD<f64>| {
            let mut m = bb_ref.clone();
            m.params_mut()[0].value = wv.clone();
            let (y, _) = m.forward(&x).unwrap();
            (&y * &r).sum()
        };
        let num = central_diff(&f, &w0, 1e-6, 10, 17);
        let ana: Vec<f64> = num
            .iter()
            .map(|&(i, _)| bb.params()[0].grad.as_slice().unwrap()[i])
            .collect();
        assert!(max_rel_err(&ana, &num) < 1e-4);
    }
}
