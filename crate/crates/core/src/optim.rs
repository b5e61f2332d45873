//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("eps must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// Per-parameter moment state is keyed by parameter name, so the update is
/// independent of traversal order.
pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    /// Learning rate for the current step (after any warmup scaling).
    current_lr: f64,
    state: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { current_lr: cfg.learning_rate, cfg, step: 0, state: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Advance the step counter; `lr` is the effective rate for this step.
    pub fn begin_step(&mut self, lr: f64) {
        self.step += 1;
        self.current_lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one decoupled-weight-decay adaptive-moment update.
    pub fn update(&mut self, name: &str, param: &mut Tensor<S>, grad: &[S]) {
        debug_assert!(self.step > 0, "call begin_step before update");
        debug_assert_eq!(param.numel(), grad.len());
        let n = param.numel();
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![S::zero(); n],
            second: vec![S::zero(); n],
        });
        let beta1 = S::cast(self.cfg.beta1);
        let beta2 = S::cast(self.cfg.beta2);
        let one = S::one();
        let lr = S::cast(self.current_lr);
        let wd = S::cast(self.cfg.weight_decay);
        let eps = S::cast(self.cfg.eps);
        let bias1 = one - S::cast(self.cfg.beta1.powi(self.step as i32));
        let bias2 = one - S::cast(self.cfg.beta2.powi(self.step as i32));

        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            entry.first[i] = beta1 * entry.first[i] + (one - beta1) * g;
            entry.second[i] = beta2 * entry.second[i] + (one - beta2) * g * g;
            let m_hat = entry.first[i] / bias1;
            let v_hat = entry.second[i] / bias2;
            data[i] = data[i] - lr * wd * data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
