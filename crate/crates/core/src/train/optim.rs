use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Plain SGD with L2 weight decay and optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(weight_decay: f64, momentum: f64) -> Self {
        Sgd {
            weight_decay,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `w -= lr * (g + weight_decay * w)`, through the velocity buffer when
    /// momentum is on. Parameters without a gradient entry are untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let mut d = g.clone();
            d.axpy(self.weight_decay, w);
            if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(w.shape()));
                for (vi, di) in v.data_mut().iter_mut().zip(d.data()) {
                    *vi = self.momentum * *vi + di;
                }
                d = v.clone();
            }
            w.axpy(-lr, &d);
        }
    }
}

/// `lr / (1 + decay * epoch)`.
pub fn lr_at(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr / (1.0 + decay * epoch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decayed_step() {
        let mut p =
            BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())]);
        let g = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.5, 0.5]).unwrap())]);
        Sgd::new(0.1, 0.0).step(&mut p, &g, 0.01);
        // w - 0.01 * (g + 0.1 w)
        let want = [1.0 - 0.01 * (0.5 + 0.1), -2.0 - 0.01 * (0.5 - 0.2)];
        for (a, b) in p["w"].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(1e-3, 1e-4, 0), 1e-3);
        assert!((lr_at(1e-3, 1e-4, 10) - 1e-3 / 1.001).abs() < 1e-18);
    }
}
