use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{MadiError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled decay (AdamW). When false the decay is folded into the
    /// gradient as classic L2 regularisation.
    pub decoupled: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decoupled: true,
        }
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update at learning rate `lr`. Frozen parameters and parameters
    /// without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (&id, g) in grads {
            if g.shape() != store.get(id).shape() {
                return Err(MadiError::Shape {
                    context: format!("gradient for parameter {}", store.name(id)),
                    expected: store.get(id).shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (&id, g) in grads {
            if store.is_frozen(id) {
                continue;
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut p = store.get(id).clone();
            let pd = p.data_mut();
            for k in 0..n {
                let mut gk = g.data()[k];
                if c.decoupled {
                    pd[k] *= 1.0 - lr * c.weight_decay;
                } else {
                    gk += c.weight_decay * pd[k];
                }
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                pd[k] -= lr * mh / (vh.sqrt() + c.eps);
            }
            store.set(id, p)?;
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        CosineSchedule {
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate for zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}
