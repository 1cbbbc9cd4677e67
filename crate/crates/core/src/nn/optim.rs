use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Param;

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// `v <- mu*v + g + wd*w; w <- w - lr*v`.
#[derive(Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, lr: f64, param: &mut Param) {
        let v = self
            .velocity
            .entry(param.name().to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        azip_update(
            v,
            &param.grad,
            &mut param.value,
            self.momentum,
            self.weight_decay,
            lr,
        );
    }
}

fn azip_update(
    v: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    w: &mut ArrayD<f64>,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) {
    let vs = v.as_slice_mut().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let ws = w.as_slice_mut().expect("standard layout");
    for i in 0..vs.len() {
        vs[i] = momentum * vs[i] + gs[i] + weight_decay * ws[i];
        ws[i] -= lr * vs[i];
    }
}
