use serde::{Deserialize, Serialize};

use super::float::Float;
use super::layers::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 penalty: `wd * p` is added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with coupled (L2) weight decay and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    steps: Vec<u64>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let n = store.len();
        Adam {
            cfg,
            steps: vec![0; n],
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps, wd) = (T::lit(c.learning_rate), T::lit(c.eps), T::lit(c.weight_decay));
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id).value.data_mut();
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); p.len()];
                self.v[i] = vec![T::zero(); p.len()];
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.data()[k] + wd * p[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(Shape::new(1, 1, 1, 3), 1.0), true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -2.0, 1e-3]).unwrap();
        opt.step(&mut store, &[(id, g)]);
        let p = store.get(id).value.data();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert!((p[2] - (1.0 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), true);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store);
        // zero loss gradient; decay alone pushes the weight toward zero.
        opt.step(&mut store, &[(id, Tensor::zeros(Shape::new(1, 1, 1, 1)))]);
        assert!(store.get(id).value.data()[0] < 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(Shape::new(1, 1, 1, 2), 3.0), true);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..500 {
            let g = store.get(id).value.map(|w| 2.0 * (w - 1.0));
            opt.step(&mut store, &[(id, g)]);
        }
        for w in store.get(id).value.data() {
            assert!((w - 1.0).abs() < 1e-3);
        }
    }
}
