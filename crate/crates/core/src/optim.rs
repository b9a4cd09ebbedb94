//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<R>>,
    pub second: BTreeMap<String, Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that carries a gradient.
    pub fn step(&mut self, params: &mut ParamStore<R>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.iter_mut() {
            let Some(grad) = p.tensor.grad().map(<[R]>::to_vec) else {
                continue;
            };
            let len = grad.len();
            let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![R::zero(); len]);
            let v = self.second.entry(p.name.clone()).or_insert_with(|| vec![R::zero(); len]);
            for (((w, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let m_new = beta1 * mi.as_f64() + (1.0 - beta1) * g;
                let v_new = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
                *mi = R::from_f64(m_new);
                *vi = R::from_f64(v_new);
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *w = R::from_f64(w.as_f64() - update);
            }
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`, clamped to the schedule.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}
