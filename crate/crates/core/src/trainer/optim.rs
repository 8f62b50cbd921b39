use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::tensor::Tensor;

use super::TrainError;

pub const WARMUP_RATIO: f64 = 0.03;

/// Linear warmup over `ceil(0.03 * total)` steps, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: usize) -> Self {
        Self { peak, total }
    }

    pub fn warmup_steps(&self) -> usize {
        (WARMUP_RATIO * self.total as f64).ceil() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64, TrainError> {
        if step > self.total {
            return Err(TrainError::Schedule { step, total: self.total });
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.peak * step as f64 / warmup as f64);
        }
        if self.total == warmup {
            return Ok(self.peak);
        }
        let progress = (step - warmup) as f64 / (self.total - warmup) as f64;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Decoupled weight decay Adam. With `weight_decay == 0` this is plain Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if grads.len() != params.len() {
            return Err(TrainError::Config(format!("{} grads for {} params", grads.len(), params.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite(format!(
                    "gradient of {} has {} at element {j}; step {} aborted",
                    params.names()[i],
                    g.data()[j],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
