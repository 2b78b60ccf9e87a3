use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{load_tensors, save_tensors, ParameterStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay. Only parameters that receive a
/// gradient in a step are touched by that step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the set of updated parameter paths.
    pub fn step(
        &mut self,
        params: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> BTreeSet<String> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut updated = BTreeSet::new();
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let [r, cols] = p.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(r, cols));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(r, cols));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let w = p.data()[i];
                p.data_mut()[i] = w - c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w);
            }
            updated.insert(name.clone());
        }
        updated
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensors(dir, "adam_m", self.step, self.first.iter())?;
        save_tensors(dir, "adam_v", self.step, self.second.iter())
    }

    pub fn load(dir: &Path, config: AdamWConfig) -> Result<Self> {
        let (step, first) = load_tensors(dir, "adam_m")?;
        let (_, second) = load_tensors(dir, "adam_v")?;
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }
}
