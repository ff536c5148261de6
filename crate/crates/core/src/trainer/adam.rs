use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, applied before the moment updates.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Real> AdamState<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

pub fn global_norm<S: Real>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update in place. Returns the gradient norm
/// before clipping.
pub fn adam_step<S: Real>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::invalid(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("tensor {i}: {:?}", p.shape())));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let scale = match cfg.clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for ((w, &g), (mj, vj)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = g.f64() * scale;
            let m1 = cfg.beta1 * mj.f64() + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * vj.f64() + (1.0 - cfg.beta2) * g * g;
            *mj = S::of(m1);
            *vj = S::of(v1);
            let step = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *w = S::of(w.f64() - step);
        }
    }
    Ok(norm)
}
