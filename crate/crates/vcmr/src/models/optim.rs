//! Adam optimizer over named parameters.
//!
//! Weight decay enters as an L2 term added to the gradient before the moment
//! updates. Per-parameter state is keyed by parameter name so it survives a
//! checkpoint round trip.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.001, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step_count: 0, slots: BTreeMap::new() }
    }

    /// One update over all trainable parameters; gradients of every handed-in
    /// parameter (frozen ones included) are cleared afterwards.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for p in params {
            if p.trainable {
                if p.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient on {}", p.name)));
                }
                let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                });
                for ((m, v), (g0, w)) in slot
                    .m
                    .iter_mut()
                    .zip(slot.v.iter_mut())
                    .zip(p.grad.iter().zip(p.value.iter_mut()))
                {
                    let g = g0 + self.cfg.weight_decay * *w;
                    *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                    *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
                }
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// Flatten moment buffers into named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, slot) in &self.slots {
            out.push((format!("adam.m.{name}"), slot.m.clone()));
            out.push((format!("adam.v.{name}"), slot.v.clone()));
        }
        out
    }

    pub fn load_state_tensors(&mut self, step_count: u64, tensors: &BTreeMap<String, ArrayD<f64>>) {
        self.step_count = step_count;
        self.slots.clear();
        for (name, m) in tensors {
            if let Some(pname) = name.strip_prefix("adam.m.") {
                if let Some(v) = tensors.get(&format!("adam.v.{pname}")) {
                    self.slots.insert(pname.to_string(), Slot { m: m.clone(), v: v.clone() });
                }
            }
        }
    }
}
