//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters are rounded to `f32`
    /// afterwards so that checkpoints reproduce them exactly.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let it = params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut().zip(self.v.values_mut()));
        for ((p, &g), (m, v)) in it {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * (update + weight_decay * *p);
        }
        params.round_to_f32();
    }
}
