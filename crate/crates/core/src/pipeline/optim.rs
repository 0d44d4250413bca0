use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// AdamW hyperparameters shared by every group; learning rates are per group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update; `t` is the 1-based step count of
/// this parameter.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config("train.lr", "learning rate must be positive"));
    }
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::dim("adamw", &[param.len()], &[grad.len()]));
    }
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let one = T::one();
    let bc1 = one - T::of(hp.beta1.powi(t as i32));
    let bc2 = one - T::of(hp.beta2.powi(t as i32));
    let (lr, eps, decay) = (T::of(lr), T::of(hp.eps), T::of(hp.weight_decay));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] = param[i] - lr * decay * param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Moments and step counts keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    pub steps: BTreeMap<String, u64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T], lr: f64, hp: &AdamW) -> Result<()> {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let t = self.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        adamw_step(param.data_mut(), grad, m.data_mut(), v.data_mut(), *t, lr, hp)
    }
}
