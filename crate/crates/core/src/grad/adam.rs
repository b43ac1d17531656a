use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam over a fixed parameter set of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    params: Vec<ParamId>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let states = params
            .iter()
            .map(|&id| AdamState {
                m: Tensor::zeros(store.value(id).shape()),
                v: Tensor::zeros(store.value(id).shape()),
                step: 0,
            })
            .collect();
        Self { config, params, states }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Replaces moment estimates, e.g. when resuming from a checkpoint.
    pub fn set_states(&mut self, states: Vec<AdamState>) -> Result<()> {
        if states.len() != self.states.len()
            || states.iter().zip(&self.states).any(|(a, b)| a.m.shape() != b.m.shape() || a.v.shape() != b.v.shape())
        {
            return Err(Error::Optimizer("state layout does not match parameter set".into()));
        }
        self.states = states;
        Ok(())
    }

    /// Bias-corrected Adam update of every owned parameter, then zeroes their grads.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        // Validate everything first so a failure leaves parameters untouched.
        for (&id, st) in self.params.iter().zip(&self.states) {
            if st.step == u64::MAX {
                return Err(Error::Optimizer(format!("step counter overflow for {}", store.name(id))));
            }
            if store.grad(id).data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Optimizer(format!("non-finite gradient for {}", store.name(id))));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (&id, st) in self.params.iter().zip(self.states.iter_mut()) {
            st.step += 1;
            let bc1 = 1.0 - beta1.powf(st.step as f64);
            let bc2 = 1.0 - beta2.powf(st.step as f64);
            let grad = store.grad(id).clone();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            let value = store.value_mut(id).data_mut();
            for (((p, g), mi), vi) in value.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if value.iter().any(|p| !p.is_finite()) {
                return Err(Error::Optimizer(format!("update made {} non-finite", store.name(id))));
            }
            store.grad_mut(id).data_mut().fill(0.0);
        }
        Ok(())
    }
}
