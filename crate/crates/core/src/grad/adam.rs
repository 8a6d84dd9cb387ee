use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::network::{GradientSet, NetworkParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn matches(&self, net: &NetworkParams) -> bool {
        let same = |x: &Vec<Vec<f64>>| {
            x.len() == net.tensors().len() && x.iter().zip(net.tensors()).all(|(a, b)| a.len() == b.len())
        };
        same(&self.m) && same(&self.v)
    }
}

/// Clip `grads` to global norm `max_norm`, then apply one Adam update.
/// Returns the norm before clipping.
pub fn sgd_adam_step(
    net: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    max_norm: f64,
) -> Result<f64> {
    if grads.dims() != net.dims() || !state.matches(net) {
        return Err(Error::Dimension {
            expected: net.dims().n_parameters(),
            got: grads.dims().n_parameters(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let norm = grads.global_norm();
    let clip = if norm > max_norm { max_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - libm::pow(BETA1, t);
    let bias2 = 1.0 - libm::pow(BETA2, t);
    for (i, params) in net.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in params.iter_mut().enumerate() {
            let g = clip * grads.tensors()[i][j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + EPSILON);
        }
    }
    Ok(norm)
}

/// Independent copy of the online network for building targets.
pub fn sync_target(net: &NetworkParams) -> NetworkParams {
    net.clone()
}
