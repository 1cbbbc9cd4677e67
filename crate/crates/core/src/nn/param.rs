use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named trainable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Kaiming-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/len agree");
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn kaiming_bounds_hold() {
        let mut rng = rng_from_seed(1);
        let p = Param::kaiming("w", &[32, 16, 3, 3], 16 * 9, &mut rng);
        let bound = (6.0f64 / (16.0 * 9.0)).sqrt();
        assert!(p.value.iter().all(|v| v.abs() < bound));
        assert_eq!(p.numel(), 32 * 16 * 9);
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }
}
