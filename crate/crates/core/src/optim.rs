use serde::{Deserialize, Serialize};

use crate::nn::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are created lazily, keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first_moment: ParamStore<T>,
    pub second_moment: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, steps: 0, first_moment: ParamStore::new(), second_moment: ParamStore::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.learning_rate / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2_sqrt);
        let eps = T::from_f64(c.eps);

        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.first_moment.get(name).is_none() {
                self.first_moment.insert(name, Tensor::zeros(p.shape()));
                self.second_moment.insert(name, Tensor::zeros(p.shape()));
            }
            let m = self.first_moment.get_mut(name).expect("moment");
            let v = self.second_moment.get_mut(name).expect("moment");
            let lanes = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in lanes {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / (v.sqrt() * inv_bc2 + eps);
            }
        }
    }
}
