//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule used by every training phase.

use crate::params::ParamSet;
use std::collections::BTreeMap;

/// Learning rate at `epoch` of `total_epochs`, decaying from `lr_max` at
/// epoch 0 to `lr_min` at the final epoch. A single-epoch schedule stays at
/// `lr_max`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs <= 1 {
        return lr_max;
    }
    let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update over every tensor of a parameter group, using the
    /// gradients accumulated on the tensors. The caller is responsible for
    /// not stepping frozen groups and for zeroing gradients afterwards.
    pub fn step_group(&mut self, group: &str, params: &mut dyn ParamSet) {
        let lr = self.lr;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let slots = &mut self.slots;
        params.for_each_mut(&mut |name, tensor| {
            let key = format!("{group}.{name}");
            let numel = tensor.numel();
            let slot = slots.entry(key).or_insert_with(|| AdamSlot {
                m: vec![0.0; numel],
                v: vec![0.0; numel],
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; numel],
            };
            let data = tensor.data_mut();
            for i in 0..numel {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * grad[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        });
    }

    /// Optimizer state in deterministic (sorted-key) order, for checkpoints.
    pub fn export_state(&self) -> Vec<(String, AdamSlot)> {
        self.slots
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn import_state(&mut self, state: Vec<(String, AdamSlot)>) {
        self.slots = state.into_iter().collect();
    }
}
