//! Adam updates and the step-then-linear-decay learning-rate schedule.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at index {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("parameter {param} has no gradient")]
    MissingGradient { param: usize },
    #[error("state tracks {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("learning rate {0} must be finite and non-negative")]
    LearningRate(f64),
    #[error("epoch {epoch} outside 1..={total}")]
    Epoch { epoch: usize, total: usize },
}

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, BETA1, BETA2, EPS)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }

    /// One Adam update using each parameter's stored gradient. Every gradient
    /// is checked before anything is modified.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<(), OptimError> {
        if params.len() != self.m.len() {
            return Err(OptimError::ParamCount {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(OptimError::LearningRate(lr));
        }
        for (pi, p) in params.iter().enumerate() {
            let g = p.grad().ok_or(OptimError::MissingGradient { param: pi })?;
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient { param: pi, index });
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr0` for the first half of training, then linear decay reaching 0 at
/// the final epoch.
pub fn lr_at_epoch(epoch: usize, total: usize, lr0: f64) -> Result<f64, OptimError> {
    if epoch == 0 || epoch > total {
        return Err(OptimError::Epoch { epoch, total });
    }
    let half = total as f64 / 2.0;
    let e = epoch as f64;
    if e <= half {
        Ok(lr0)
    } else {
        Ok((lr0 * (1.0 - (e - half) / half)).max(0.0))
    }
}
