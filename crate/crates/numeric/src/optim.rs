//! AdamW with decoupled weight decay and bias correction.

use crate::error::{NumericError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamW {
    config: AdamWConfig,
    step_count: u64,
    moments: Vec<Moment>,
}

impl AdamW {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Result<AdamW> {
        if !(config.beta1 > 0.0 && config.beta1 < 1.0) {
            return Err(NumericError::InvalidArgument(format!("beta1 {} not in (0,1)", config.beta1)));
        }
        if !(config.beta2 > 0.0 && config.beta2 < 1.0) {
            return Err(NumericError::InvalidArgument(format!("beta2 {} not in (0,1)", config.beta2)));
        }
        if !(config.learning_rate > 0.0) {
            return Err(NumericError::InvalidArgument(format!(
                "learning rate {} must be positive",
                config.learning_rate
            )));
        }
        let moments = params
            .iter()
            .map(|p| Moment { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
            .collect();
        Ok(AdamW { config, step_count: 0, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One update over the same parameter list the optimizer was built for.
    /// Parameters whose grad is absent this step are left untouched: under
    /// hard routing an expert only moves on its own group's batches.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(NumericError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (param, moment) in params.iter().zip(self.moments.iter_mut()) {
            let Some(grad) = param.grad() else { continue };
            if grad.len() != moment.m.len() {
                return Err(NumericError::ShapeMismatch {
                    context: "adamw step",
                    expected: vec![moment.m.len()],
                    got: vec![grad.len()],
                });
            }
            param.apply_update(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    moment.m[i] = c.beta1 * moment.m[i] + (1.0 - c.beta1) * g;
                    moment.v[i] = c.beta2 * moment.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = moment.m[i] / bc1;
                    let v_hat = moment.v[i] / bc2;
                    data[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon))
                        + c.learning_rate * c.weight_decay * data[i];
                }
            });
        }
        Ok(())
    }
}

/// Clears gradients on a parameter list between steps.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}
