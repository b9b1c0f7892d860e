//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{is_decayed, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && [self.lr, self.weight_decay, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape()));
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of a flat buffer. `step` counts from 1.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hyper: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - hyper.lr * hyper.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let denom = (v[i] / bc2).sqrt() + hyper.eps;
        let update = if denom > 0.0 { m_hat / denom } else { 0.0 };
        param[i] = param[i] * shrink - hyper.lr * update;
    }
}

/// Applies one update to every tensor of the model.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    hyper: &AdamWConfig,
) -> Result<()> {
    let names = params.names();
    for (((name, p), g), (m, v)) in names
        .iter()
        .zip(params.iter())
        .zip(grads.iter())
        .zip(state.m.iter().zip(state.v.iter()))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "{name}: parameter {:?}, gradient {:?}, moments {:?}/{:?}",
                p.shape(),
                g.shape(),
                m.shape(),
                v.shape()
            )));
        }
    }
    if grads.count() != params.count() || state.m.count() != params.count() {
        return Err(Error::Shape("gradient and parameter layouts differ".into()));
    }
    state.step += 1;
    let step = state.step;
    for (((name, p), g), (m, v)) in names
        .iter()
        .zip(params.iter_mut())
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        adamw_update(
            p.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            step,
            hyper,
            is_decayed(name),
        );
    }
    Ok(())
}
