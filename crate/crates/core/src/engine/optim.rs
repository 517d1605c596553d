//! AdamW with decoupled weight decay and bias-corrected moments.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update:
    ///
    /// ```text
    /// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
    /// p -= lr (wd p + (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps))
    /// ```
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(
                "adamw",
                format!(
                    "{} gradients and {} moment slots for {} parameters",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for (id, grad) in params.ids().zip(grads) {
            let grad = grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(params.name(id).to_string()))?;
            if grad.shape() != params.get(id).shape() {
                return Err(Error::shape("adamw", params.get(id).shape(), grad.shape()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for ((id, grad), (m, v)) in params.ids().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let grad = grad.as_ref().expect("checked above").data();
            let p = params.get_mut(id).data_mut();
            for (((pv, g), mv), vv) in p.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv -= lr * (weight_decay * *pv + update);
            }
        }
        Ok(())
    }
}
