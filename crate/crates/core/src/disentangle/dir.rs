use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{ops, Conv2d, Conv2dCache, Param};

/// Domain-invariant representation extractor: three 3x3 convolutions
/// (64 -> 64 -> 64 -> 64, padding 1), ReLU after the first two, linear last,
/// so the output shape equals the input shape.
#[derive(Debug, Clone)]
pub struct DirExtractor {
    convs: Vec<Conv2d>,
}

pub struct DirCache {
    conv_caches: Vec<Conv2dCache>,
    relu_outs: Vec<Array3<f64>>,
}

impl DirExtractor {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let convs = (0..3)
            .map(|i| Conv2d::new(&format!("dir_extractor.conv{i}"), channels, channels, 3, 1, 1, rng))
            .collect();
        Self { convs }
    }

    pub fn forward(&self, f_b: &Array3<f64>) -> Result<(Array3<f64>, DirCache)> {
        let mut conv_caches = Vec::with_capacity(3);
        let mut relu_outs = Vec::with_capacity(2);
        let (y0, c0) = self.convs[0].forward(f_b)?;
        let a0 = ops::relu(&y0);
        conv_caches.push(c0);
        relu_outs.push(a0.clone());
        let (y1, c1) = self.convs[1].forward(&a0)?;
        let a1 = ops::relu(&y1);
        conv_caches.push(c1);
        relu_outs.push(a1.clone());
        let (f_di, c2) = self.convs[2].forward(&a1)?;
        conv_caches.push(c2);
        Ok((
            f_di,
            DirCache {
                conv_caches,
                relu_outs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &DirCache, g_di: &Array3<f64>) -> Array3<f64> {
        let g = self.convs[2].backward(&cache.conv_caches[2], g_di);
        let g = ops::relu_backward(&cache.relu_outs[1], &g);
        let g = self.convs[1].backward(&cache.conv_caches[1], &g);
        let g = ops::relu_backward(&cache.relu_outs[0], &g);
        self.convs[0].backward(&cache.conv_caches[0], &g)
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
