//! Adam with bias correction. Updated parameters are rounded through f32 so
//! the values held in memory always match what a parameter file can store.

use crate::error::{Error, Result};
use crate::nn::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Optimizer state shaped after `params`, all moments zero.
    pub fn new(lr: f64, params: &ModelParams) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            step: 0,
            m: params.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` holds one gradient slice per tensor, in the same
    /// order as `params.params`; an empty slice means "no gradient" and
    /// leaves that tensor untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.params.len() {
            return Err(Error::Usage(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                params.params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            if grad.is_empty() {
                continue;
            }
            let tensor = &mut params.params[i];
            if grad.len() != tensor.values.len() {
                return Err(Error::Usage(format!(
                    "gradient for {} has {} entries, expected {}",
                    tensor.name,
                    grad.len(),
                    tensor.values.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let next = tensor.values[j] - self.lr * m_hat / (v_hat.sqrt() + EPSILON);
                // Keep parameters exactly f32-representable.
                let next = next as f32 as f64;
                if !next.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "parameter {} diverged during update",
                        tensor.name
                    )));
                }
                tensor.values[j] = next;
            }
        }
        Ok(())
    }
}
