//! AdamW with per-group learning-rate multipliers and a warmup + step
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamGroup, ParamId, ParamStore};

/// Linear warmup over `warmup` iterations, then `γ^k` decay after the `k`-th
/// milestone (milestones are iteration counts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr milestones {:?} must be strictly ascending",
                self.milestones
            )));
        }
        Ok(())
    }

    pub fn lr(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.base * t as f64 / self.warmup as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| t >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrMultipliers {
    pub backbone: f64,
    pub embedding: f64,
    pub head: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        LrMultipliers {
            backbone: 1.0,
            embedding: 1.0,
            head: 1.0,
        }
    }
}

impl LrMultipliers {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Head => self.head,
        }
    }
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u32>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let n = store.len();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
            steps: vec![0; n],
        }
    }

    /// One update of every parameter that has a gradient. Decay is decoupled
    /// and skipped for vectors (biases, norm gains).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64, mult: &LrMultipliers) {
        for (id, grad) in grads {
            let i = id.index();
            let entry = store.entry(*id);
            let lr_p = lr * mult.get(entry.group);
            let decay = entry.value.shape().len() >= 2;
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; grad.len()];
                self.v[i] = vec![0.0; grad.len()];
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(*id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let upd = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                if decay {
                    w[k] -= lr_p * self.weight_decay * w[k];
                }
                w[k] -= lr_p * upd;
            }
        }
    }
}
