//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first/second moment per parameter name plus the shared
/// step counter. Parameter names are the serialization names, so state can
/// be checkpointed alongside the model.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advance the step counter; call once per optimization step, before
    /// updating the parameters of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One AdamW update for a single named parameter. Returns the new value.
    ///
    /// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &[f64]) -> Result<Tensor> {
        if grad.len() != param.numel() {
            return Err(Error::contract(format!(
                "adamw: gradient length {} does not match parameter {} ({})",
                grad.len(),
                name,
                param.numel()
            )));
        }
        if self.t == 0 {
            return Err(Error::contract("adamw: call begin_step before update"));
        }
        let n = param.numel();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if slot.m.len() != n {
            return Err(Error::contract(format!(
                "adamw: state shape changed for parameter {name}"
            )));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(n);
        for ((&p, &g), (m, v)) in param
            .data()
            .iter()
            .zip(grad.iter())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            out.push(p - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p));
        }
        Tensor::new(param.shape().to_vec(), out)
    }

    /// Moment arrays for checkpointing, in deterministic name order.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    pub fn import_state(&mut self, t: u64, slots: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.slots = slots
            .into_iter()
            .map(|(k, m, v)| (k, Slot { m, v }))
            .collect();
    }
}
