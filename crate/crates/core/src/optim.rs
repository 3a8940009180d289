//! Adam with bias-corrected moments.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every tensor of one [`ParamStore`], plus the
/// step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} parameters, {} gradients, {}/{} moment tensors",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for ((p, g), (m, v)) in params.tensors().iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        for other in [g, m, v] {
            if other.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), other.shape()));
            }
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let step = cfg.lr * c2.sqrt() / c1;
    let eps_hat = cfg.eps * c2.sqrt();
    for (((p, g), m), v) in params
        .buffers_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + eps_hat);
        }
    }
    Ok(())
}
