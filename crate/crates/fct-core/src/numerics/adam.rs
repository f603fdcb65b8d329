//! Adam with coupled L2 weight decay (the decay term is added to the
//! gradient before the moment updates, as in the original formulation).

use serde::{Deserialize, Serialize};

use super::layers::ParamSlot;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every slot. Slot count and lengths must match
    /// across calls; moment buffers are allocated on the first one.
    pub fn update(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != slots.len()
            || slots.iter().zip(&self.m).any(|(s, m)| s.value.len() != m.len())
        {
            return Err(Error::State(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        for slot in slots.iter() {
            if slot.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient passed to Adam".into()));
            }
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (m, v)) in slots.iter_mut().zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..slot.value.len() {
                let g = slot.grad[i] + self.weight_decay * slot.value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                slot.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
