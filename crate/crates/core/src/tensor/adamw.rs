//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Optimizer hyperparameters. Defaults follow the training setup:
/// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Fresh state with zeroed moments matching `param_sizes` (element
    /// counts per parameter tensor, in update order).
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamWState {
            config,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One decoupled-decay update:
    ///
    /// ```text
    /// p ← p·(1 − lr·wd)
    /// m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
    /// p ← p − lr·m̂ / (√v̂ + ε)   with bias-corrected m̂, v̂
    /// ```
    ///
    /// Decay multiplies the parameter directly rather than entering the
    /// moment buffers, so a zero gradient with wd = 0 leaves parameters
    /// untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::OptimizerMismatch(format!(
                "{} params / {} grads vs state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(TensorError::OptimizerMismatch(format!(
                    "tensor {i}: param {} / grad {} vs state {}",
                    p.numel(),
                    grads[i].len(),
                    self.m[i].len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;

        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in
                param.data.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *p *= decay;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
