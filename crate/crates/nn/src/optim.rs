//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// β = (0.9, 0.95), decay 1e-2, used for both transformer models.
    pub fn adamw_transformer() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    /// β = (0.5, 0.99) without decay, used for the adversarial baseline.
    pub fn adam_adversarial() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<f32>>,
    pub(crate) v: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepReport {
    /// Set when a non-finite gradient was seen; parameters and moments are untouched.
    pub skipped: bool,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, id: usize) -> &[f32] {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &[f32] {
        &self.v[id]
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        OptimizerState { config, step, m, v }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<StepReport> {
        if self.m.len() != params.len() {
            return Err(NnError::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        if !grads.all_finite() {
            return Ok(StepReport {
                skipped: true,
                step: self.step,
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for id in 0..params.len() {
            let g = grads.at(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.tensor_at_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p[i] = (p[i] as f64 * decay - lr * upd) as f32;
            }
        }
        Ok(StepReport {
            skipped: false,
            step: self.step,
        })
    }
}

/// Convenience wrapper matching the usual `adamw_step(params, grads, state)` call shape.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut OptimizerState, lr: f64) -> Result<StepReport> {
    state.step(params, grads, lr)
}
