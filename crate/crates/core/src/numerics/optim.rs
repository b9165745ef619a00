use super::params::ParamStore;
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, reading gradients from the store's buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.param(id).grad.clone();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let value = store.value_mut(id).data_mut();
            for (((w, g), m), v) in value.iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w -= update;
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.param(id).grad.clone();
            for (w, g) in store.value_mut(id).data_mut().iter_mut().zip(grad.data()) {
                *w -= self.lr * g;
            }
        }
    }
}
