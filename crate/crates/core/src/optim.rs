//! Adam with decoupled weight decay over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    settings: AdamSettings,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, settings: AdamSettings) -> Self {
        Self {
            settings,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let s = &self.settings;
        let (b1, b2) = (s.beta1 as f32, s.beta2 as f32);
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        let lr = s.learning_rate as f32;
        let step = (s.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (s.eps * c2.sqrt()) as f32;
        let decay = lr * s.weight_decay as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= decay * *p + step * *m / (v.sqrt() + eps);
        }
    }
}
