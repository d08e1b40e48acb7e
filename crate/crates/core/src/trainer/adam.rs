//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numeric::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, t), (m, v))| m.len() == t.len() && v.len() == t.len())
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<T: Real>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for t in params.tensors_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<T> = g.iter().map(|&x| x * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// One Adam update from the gradients stored on `params`. Parameters with no
/// gradient are left untouched. A non-finite gradient aborts the step before
/// any state changes.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one, eps, lr) = (T::one(), c(cfg.eps), c(cfg.learning_rate));
    let bc1 = c(1.0 - cfg.beta1.powi(step));
    let bc2 = c(1.0 - cfg.beta2.powi(step));
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (p, &gk)) in t.data_mut().iter_mut().zip(&g).enumerate() {
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
