use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor2>,
    pub v: BTreeMap<String, Tensor2>,
}

impl AdamW {
    /// One update. Parameters without a gradient entry are treated as having
    /// zero gradient (they still decay).
    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor2>,
        state: &mut OptimizerState,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for {name}")));
            }
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (r, c) = p.shape();
            let m = state.m.entry(name.clone()).or_insert_with(|| Tensor2::zeros(r, c));
            let v = state.v.entry(name.clone()).or_insert_with(|| Tensor2::zeros(r, c));
            let g = grads.get(name);
            for k in 0..p.len() {
                let gk = g.map(|g| g.data()[k]).unwrap_or(0.0);
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                let pk = &mut p.data_mut()[k];
                *pk -= self.lr * (update + self.weight_decay * *pk);
            }
        }
        Ok(())
    }
}
