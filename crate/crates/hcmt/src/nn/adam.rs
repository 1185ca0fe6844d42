use std::collections::BTreeMap;

use super::ParamSet;
use crate::{Error, Result};

/// Adam with exponential learning-rate decay `lr(t) = lr_start ·
/// (lr_end/lr_start)^(t/total_steps)`, clamped at `lr_end` past the horizon.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_start: 1e-4,
            lr_end: 1e-6,
            total_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

/// Per-parameter first/second moment estimates plus a step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every tensor of `params`. The learning rate is
    /// evaluated at the pre-increment step count, so the first update uses
    /// exactly `lr_start`.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut impl ParamSet) -> Result<()> {
        let lr = cfg.lr(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let mut failure: Option<String> = None;
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; tensor.len()], vec![0.0; tensor.len()]));
            let grads = tensor.grad().to_vec();
            for (k, &g) in grads.iter().enumerate() {
                if !g.is_finite() {
                    failure = Some(format!("non-finite gradient in {name}[{k}]: {g}"));
                    return;
                }
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                tensor.values_mut()[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        });
        match failure {
            Some(msg) => Err(Error::Numerical(msg)),
            None => Ok(()),
        }
    }
}
