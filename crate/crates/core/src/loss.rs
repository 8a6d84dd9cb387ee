//! Exact Cramér distance and its PDF-only surrogate over an [`AlignedPair`].
//!
//! Both losses read the two density vectors of a pair on its shared support.
//! The exact distance integrates each density into a CDF first; the surrogate
//! never forms a CDF and weights squared density differences by the total
//! distance of each support point to all others:
//!
//! ```text
//! L = (1 / N^2) * sqrt( sum_i (p_i - q_i)^2 * w_i ),   w_i = sum_j |y_i - y_j|
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::target::AlignedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LossKind {
    Exact,
    #[default]
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

/// `w_i = sum_j |y_i - y_j|` for a sorted support, in O(N).
///
/// Accumulated from consecutive gaps only, so translating the support by a
/// constant that keeps every gap exact reproduces the weights bit-for-bit.
pub fn surrogate_weights(support: &[f64]) -> Vec<f64> {
    let n = support.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return w;
    }
    let gaps: Vec<f64> = support.windows(2).map(|s| s[1] - s[0]).collect();
    let mut left = 0.0;
    for i in 1..n {
        left += gaps[i - 1] * i as f64;
        w[i] = left;
    }
    let mut right = 0.0;
    for i in (0..n - 1).rev() {
        right += gaps[i] * (n - 1 - i) as f64;
        w[i] += right;
    }
    w
}

/// `sum_i (p_i - q_i)^2 w_i`, the quantity under the surrogate's square root.
pub fn surrogate_radicand(predicted: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    predicted
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, q), w)| {
            let d = p - q;
            d * d * w
        })
        .sum()
}

fn surrogate_from_parts(predicted: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    let n = predicted.len() as f64;
    libm::sqrt(surrogate_radicand(predicted, target, weights)) / (n * n)
}

pub fn surrogate_cramer(pair: &AlignedPair) -> LossValue {
    let w = surrogate_weights(pair.support());
    LossValue {
        value: surrogate_from_parts(pair.predicted(), pair.target(), &w),
        kind: LossKind::Surrogate,
    }
}

fn surrogate_grad_from_parts(predicted: &[f64], target: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = predicted.len() as f64;
    let s = surrogate_radicand(predicted, target, weights);
    if s <= 0.0 {
        return vec![0.0; predicted.len()];
    }
    let scale = 1.0 / (n * n * libm::sqrt(s));
    predicted
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, q), w)| (p - q) * w * scale)
        .collect()
}

/// Gradient of [`surrogate_cramer`] with respect to the predicted densities.
/// At a zero loss the zero vector is returned.
pub fn surrogate_gradient(pair: &AlignedPair) -> Vec<f64> {
    let w = surrogate_weights(pair.support());
    surrogate_grad_from_parts(pair.predicted(), pair.target(), &w)
}

/// Cumulative trapezoid integral of `density` over `support`, starting at 0.
fn cumulative_trapezoid(support: &[f64], density: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(density.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..density.len() {
        acc += 0.5 * (support[i] - support[i - 1]) * (density[i] + density[i - 1]);
        out.push(acc);
    }
    out
}

/// Trapezoid quadrature weights of `support`.
fn trapezoid_weights(support: &[f64]) -> Vec<f64> {
    let n = support.len();
    let mut tw = vec![0.0; n];
    for i in 1..n {
        let h = 0.5 * (support[i] - support[i - 1]);
        tw[i - 1] += h;
        tw[i] += h;
    }
    tw
}

fn exact_radicand(support: &[f64], pc: &[f64], qc: &[f64], p: f64) -> f64 {
    let tw = trapezoid_weights(support);
    pc.iter()
        .zip(qc)
        .zip(&tw)
        .map(|((a, b), w)| libm::pow((a - b).abs(), p) * w)
        .sum()
}

/// `(integral |P - Q|^p)^(1/p)` with each CDF obtained by cumulative
/// trapezoid integration of its density, ending at that density's own mass.
pub fn exact_cramer(pair: &AlignedPair, p: f64) -> LossValue {
    let value = exact_value_only(pair.support(), pair.predicted(), pair.target(), p);
    LossValue {
        value,
        kind: LossKind::Exact,
    }
}

/// Gradient of [`exact_cramer`] with respect to the predicted densities.
pub fn exact_cramer_gradient(pair: &AlignedPair, p: f64) -> Vec<f64> {
    exact_value_and_grad(pair.support(), pair.predicted(), pair.target(), p).1
}

fn exact_value_only(support: &[f64], predicted: &[f64], target: &[f64], p: f64) -> f64 {
    let pc = cumulative_trapezoid(support, predicted);
    let qc = cumulative_trapezoid(support, target);
    libm::pow(exact_radicand(support, &pc, &qc, p), 1.0 / p)
}

fn exact_value_and_grad(support: &[f64], predicted: &[f64], target: &[f64], p: f64) -> (f64, Vec<f64>) {
    let n = support.len();
    let pc = cumulative_trapezoid(support, predicted);
    let qc = cumulative_trapezoid(support, target);
    let tw = trapezoid_weights(support);
    let s = exact_radicand(support, &pc, &qc, p);
    let value = libm::pow(s, 1.0 / p);
    if s <= 0.0 {
        return (value, vec![0.0; n]);
    }
    let outer = libm::pow(s, 1.0 / p - 1.0) / p;
    let d_cum: Vec<f64> = (0..n)
        .map(|i| {
            let d = pc[i] - qc[i];
            outer * tw[i] * p * libm::pow(d.abs(), p - 1.0) * d.signum()
        })
        .collect();
    // C_i = sum_{k < i} h_k (x_k + x_{k+1}) / 2 ; back through the running sum.
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + d_cum[i];
    }
    let mut grad = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = 0.5 * (support[k + 1] - support[k]);
        // interval k feeds C_{k+1}, ..., C_{n-1}
        let g = h * suffix[k + 1];
        grad[k] += g;
        grad[k + 1] += g;
    }
    (value, grad)
}

/// Loss value and gradient with respect to the predicted grid densities.
/// `weights` must come from [`surrogate_weights`] on the same support when
/// `kind` is [`LossKind::Surrogate`]; it is ignored otherwise.
pub(crate) fn value_and_grad(
    kind: LossKind,
    p: f64,
    support: &[f64],
    weights: &[f64],
    predicted: &[f64],
    target: &[f64],
) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Surrogate => (
            surrogate_from_parts(predicted, target, weights),
            surrogate_grad_from_parts(predicted, target, weights),
        ),
        LossKind::Exact => exact_value_and_grad(support, predicted, target, p),
    }
}

pub(crate) fn value_only(
    kind: LossKind,
    p: f64,
    support: &[f64],
    weights: &[f64],
    predicted: &[f64],
    target: &[f64],
) -> f64 {
    match kind {
        LossKind::Surrogate => surrogate_from_parts(predicted, target, weights),
        LossKind::Exact => exact_value_only(support, predicted, target, p),
    }
}
