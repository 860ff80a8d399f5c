use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Matrix, NumericsError};
use crate::math;

/// AdamW hyperparameters. Only the learning rate varies between uses;
/// the rest are the standard defaults.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    pub fn with_lr(lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            ..AdamWParams::default()
        }
    }
}

impl Default for AdamWParams {
    fn default() -> AdamWParams {
        AdamWParams {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-tensor AdamW state: step counter plus first/second moment buffers
/// shaped like the parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub params: AdamWParams,
}

impl AdamW {
    pub fn new(len: usize, params: AdamWParams) -> AdamW {
        AdamW {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            params,
        }
    }

    pub fn for_matrix(rows: usize, cols: usize, params: AdamWParams) -> AdamW {
        AdamW::new(rows * cols, params)
    }

    /// Decoupled-weight-decay update with bias correction:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn update(&mut self, param: &mut [f64], grad: &[f64]) -> Result<(), NumericsError> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NumericsError::Dimension(format!(
                "adamw update: param {} grad {} state {}",
                param.len(),
                grad.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - math::powi(p.beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(p.beta2, self.step as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= p.lr * (m_hat / (math::sqrt(v_hat) + p.eps) + p.weight_decay * param[i]);
        }
        Ok(())
    }

    pub fn update_matrix(
        &mut self,
        param: &mut Matrix,
        grad: &Matrix,
    ) -> Result<(), NumericsError> {
        if param.rows() != grad.rows() || param.cols() != grad.cols() {
            return Err(NumericsError::Dimension(format!(
                "adamw update: param {}x{} grad {}x{}",
                param.rows(),
                param.cols(),
                grad.rows(),
                grad.cols()
            )));
        }
        self.update(param.as_mut_slice(), grad.as_slice())
    }
}
