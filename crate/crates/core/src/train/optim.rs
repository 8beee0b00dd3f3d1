//! Learning-rate schedule and decoupled-weight-decay Adam.

use serde::{Deserialize, Serialize};

use crate::net::Network;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    /// Rate for zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let decay = self.total.saturating_sub(self.warmup);
        if decay <= 1 {
            return if step + 1 >= self.total { 0.0 } else { self.base };
        }
        let t = ((step - self.warmup) as f64 / (decay - 1) as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Adam moments for every parameter tensor, in visit order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to raw parameter slices with their gradients.
    pub fn update<'a>(&mut self, lr: f64, params: impl Iterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] *= 1.0 - lr * weight_decay;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// One step over all network parameters using their accumulated gradients.
    pub fn step(&mut self, net: &mut Network, lr: f64) {
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        net.visit_params(&mut |_, t| {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            pairs.push((t.data().to_vec(), g));
        });
        self.update(lr, pairs.iter_mut().map(|(p, g)| (p.as_mut_slice(), g.as_slice())));
        let mut it = pairs.into_iter();
        net.visit_params_mut(&mut |_, t| {
            if let Some((p, _)) = it.next() {
                t.data_mut().copy_from_slice(&p);
            }
        });
    }
}
