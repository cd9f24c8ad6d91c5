//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update in place.
///
/// `θ ← θ(1 - η·λ·mask) - η·m̂/(√v̂ + ε)`, with bias-corrected moments.
pub fn adamw_step(
    params: &mut [f64],
    grad: &[f64],
    decay_mask: &[bool],
    state: &mut OptimizerState,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n || decay_mask.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            format!("{n} entries"),
            format!(
                "grad {}, mask {}, moments {}/{}",
                grad.len(),
                decay_mask.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        weight_decay,
        eps,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        if decay_mask[i] && weight_decay != 0.0 {
            params[i] *= 1.0 - lr * weight_decay;
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
