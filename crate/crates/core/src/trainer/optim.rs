use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tensor};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let t = (step - warmup_steps).min(span) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}

/// Momentum coefficient ramped from `mu0` at step 0 to 1 at `total` on a
/// cosine.
pub fn momentum_schedule(step: usize, total: usize, mu0: f64) -> f64 {
    if total == 0 {
        return mu0;
    }
    let t = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - mu0) * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW step on a flat buffer. `t` is the 1-based step count used for
/// bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape("adamw_update", &[param.len()], &[grad.len(), m.len(), v.len()]));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    let (b1t, b2t, one) = (T::lit(b1), T::lit(b2), T::one());
    let (lr_t, c1t, c2t, eps, wd_t) = (T::lit(lr), T::lit(c1), T::lit(c2), T::lit(cfg.eps), T::lit(lr * wd));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1t * m[i] + (one - b1t) * g;
        v[i] = b2t * v[i] + (one - b2t) * g * g;
        let mhat = m[i] / c1t;
        let vhat = v[i] / c2t;
        param[i] = param[i] - wd_t * param[i] - lr_t * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// First and second moments mirroring a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    /// Steps every tensor; weight decay only touches matrices.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract("optimizer state does not match the parameter list"));
        }
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let decay = p.rank() == 2;
            adamw_update(
                p.data_mut(),
                grads[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                self.t,
                cfg,
                decay,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_schedule(10, 10, 110, 2.0), 2.0);
        assert_eq!(lr_schedule(110, 10, 110, 2.0), 0.0);
        assert!((lr_schedule(60, 10, 110, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 10, 110, 2.0), 0.0);
        assert_eq!(lr_schedule(5, 10, 110, 2.0), 1.0);
    }

    #[test]
    fn momentum_ramps_to_one() {
        assert!((momentum_schedule(0, 100, 0.996) - 0.996).abs() < 1e-15);
        assert_eq!(momentum_schedule(100, 100, 0.996), 1.0);
    }
}
