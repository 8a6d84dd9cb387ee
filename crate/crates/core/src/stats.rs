//! Quadrature and summary statistics for learned and sampled return laws.

use alloc::vec::Vec;

use crate::error::{domain, Result};
use crate::flow::{flow_cdf, MixtureFlowParams};
use crate::special::normal_pdf;

/// Points of the return grid used by [`cramer_to_samples`].
pub const CRAMER_GRID: usize = 2048;

/// Trapezoid rule over possibly non-uniform abscissae.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Mean and standard deviation of the return law of a flow, integrating the
/// map against the base density over `z` in `[-12, 12]`.
pub fn flow_moments(params: &MixtureFlowParams) -> (f64, f64) {
    let n = 4801;
    let (mut m1, mut m2) = (0.0, 0.0);
    let h = 24.0 / (n - 1) as f64;
    for i in 0..n {
        let z = -12.0 + h * i as f64;
        let w = if i == 0 || i == n - 1 { 0.5 * h } else { h } * normal_pdf(z);
        let y = params.map(z);
        m1 += w * y;
        m2 += w * y * y;
    }
    (m1, libm::sqrt((m2 - m1 * m1).max(0.0)))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    libm::sqrt(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
}

/// Exact Cramér distance of order `p` between a flow's return law and the
/// empirical law of `samples`, by trapezoid rule on a uniform grid spanning
/// both supports.
pub fn cramer_to_samples(params: &MixtureFlowParams, samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(domain("need at least one sample"));
    }
    if !(p > 0.0) {
        return Err(domain("order must be positive"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let g = params.g_max();
    let lo = (-g).min(sorted[0]);
    let hi = g.max(sorted[sorted.len() - 1]);
    let n = sorted.len() as f64;
    let mut xs = Vec::with_capacity(CRAMER_GRID);
    let mut diffs = Vec::with_capacity(CRAMER_GRID);
    for i in 0..CRAMER_GRID {
        let y = lo + (hi - lo) * i as f64 / (CRAMER_GRID - 1) as f64;
        let empirical = sorted.partition_point(|&s| s <= y) as f64 / n;
        xs.push(y);
        diffs.push(libm::pow((flow_cdf(params, y)? - empirical).abs(), p));
    }
    Ok(libm::pow(trapezoid(&xs, &diffs), 1.0 / p))
}

/// Positions of the local maxima of a sampled density whose height is at
/// least `rel_threshold` times the global peak. A flat run of equal values
/// counts once, at its midpoint.
pub fn modes(support: &[f64], density: &[f64], rel_threshold: f64) -> Vec<f64> {
    let peak = density.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::new();
    if peak <= 0.0 {
        return out;
    }
    let n = density.len();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && density[j + 1] == density[i] {
            j += 1;
        }
        let left_lower = i == 0 || density[i - 1] < density[i];
        let right_lower = j + 1 == n || density[j + 1] < density[i];
        if left_lower && right_lower && density[i] >= rel_threshold * peak {
            out.push(0.5 * (support[i] + support[j]));
        }
        i = j + 1;
    }
    out
}
