//! Bootstrap target distributions and support alignment.
//!
//! The next-state flow is composed with `b(y) = r + gamma * y`, an affine flow
//! layer whose Jacobian contributes `-log(gamma)` to the log-density. Terminal
//! transitions replace the degenerate target at `r` with `N(r, sigma_final)`.
//! Predicted and target samples live on different supports, so both are
//! carried onto one symmetric uniform grid: the prediction by linear
//! interpolation of its analytic densities, the target by Gaussian KDE.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::envs::Transition;
use crate::error::{domain, Error, Result};
use crate::flow::{forward_sample, ReturnSample};
use crate::grad::NetworkParams;
use crate::special::{normal_log_pdf, FRAC_1_SQRT_2PI};

/// Samples of a target distribution together with their log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSampleSet {
    pub returns: Vec<f64>,
    pub log_densities: Vec<f64>,
    pub terminal: bool,
}

impl TargetSampleSet {
    pub fn new(returns: Vec<f64>, log_densities: Vec<f64>, terminal: bool) -> Result<Self> {
        if returns.len() != log_densities.len() {
            return Err(Error::Dimension {
                expected: returns.len(),
                got: log_densities.len(),
            });
        }
        if log_densities.iter().any(|l| !l.is_finite()) {
            return Err(domain("target log-densities must be finite"));
        }
        Ok(Self {
            returns,
            log_densities,
            terminal,
        })
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

/// Predicted and target densities on one shared, strictly increasing support.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    support: Vec<f64>,
    predicted: Vec<f64>,
    target: Vec<f64>,
}

impl AlignedPair {
    pub fn new(support: Vec<f64>, predicted: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if predicted.len() != support.len() {
            return Err(Error::Dimension {
                expected: support.len(),
                got: predicted.len(),
            });
        }
        if target.len() != support.len() {
            return Err(Error::Dimension {
                expected: support.len(),
                got: target.len(),
            });
        }
        if support.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("support must be strictly increasing"));
        }
        if predicted.iter().chain(&target).any(|d| !d.is_finite() || *d < 0.0) {
            return Err(domain("densities must be finite and non-negative"));
        }
        Ok(Self {
            support,
            predicted,
            target,
        })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// Push one next-state sample through `y -> r + gamma * y`.
pub fn bootstrap_sample(next: &ReturnSample, r: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(domain(format!("gamma must be positive, got {gamma}")));
    }
    Ok((r + gamma * next.y, next.log_density - libm::log(gamma)))
}

/// Gaussian stand-in `N(r, sigma)` for the Dirac target of a terminal step,
/// sampled at `r + sigma * z` for each base draw.
pub fn terminal_target(r: f64, sigma: f64, z_batch: &[f64]) -> Result<TargetSampleSet> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain(format!("terminal sigma must be positive, got {sigma}")));
    }
    let log_sigma = libm::log(sigma);
    let returns: Vec<f64> = z_batch.iter().map(|&z| r + sigma * z).collect();
    let log_densities = returns
        .iter()
        .map(|&y| normal_log_pdf((y - r) / sigma) - log_sigma)
        .collect();
    TargetSampleSet::new(returns, log_densities, true)
}

/// Kernel contributions beyond this many bandwidths are below 3e-18 of the
/// peak and are skipped.
const KERNEL_CUTOFF: f64 = 9.0;

/// Gaussian KDE `(1 / (M h)) sum_j phi((q - s_j) / h)` at every query.
pub fn kde_evaluate(samples: &[f64], bandwidth: f64, queries: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(domain("KDE needs at least one sample"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = FRAC_1_SQRT_2PI / (sorted.len() as f64 * bandwidth);
    let reach = KERNEL_CUTOFF * bandwidth;
    Ok(queries
        .iter()
        .map(|&q| {
            let lo = sorted.partition_point(|&s| s < q - reach);
            let hi = sorted.partition_point(|&s| s <= q + reach);
            let acc: f64 = sorted[lo..hi]
                .iter()
                .map(|&s| {
                    let u = (q - s) / bandwidth;
                    libm::exp(-0.5 * u * u)
                })
                .sum();
            acc * norm
        })
        .collect())
}

/// [`kde_evaluate`] on the uniform grid `lo + k * step`, `k < count`.
///
/// Along a uniform grid the kernel values of one sample obey
/// `e[k+1] = e[k] * r[k]`, `r[k+1] = r[k] * c`, so each grid point costs
/// two multiplications instead of an exponential. The recurrence is used
/// only while `step <= bandwidth`; coarser grids fall back to direct
/// evaluation.
pub fn kde_on_uniform_grid(samples: &[f64], bandwidth: f64, lo: f64, step: f64, count: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(domain("KDE needs at least one sample"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(domain(format!("grid step must be positive, got {step}")));
    }
    let grid: Vec<f64> = (0..count).map(|k| lo + step * k as f64).collect();
    if step > bandwidth {
        return kde_evaluate(samples, bandwidth, &grid);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = vec![0.0; count];
    let reach = KERNEL_CUTOFF * bandwidth;
    let d = step / bandwidth;
    let c = libm::exp(-d * d);
    for &s in &sorted {
        let first = libm::ceil((s - reach - lo) / step).max(0.0);
        if first >= count as f64 {
            continue;
        }
        let mut k = first as usize;
        let u0 = (grid[k] - s) / bandwidth;
        let mut e = libm::exp(-0.5 * u0 * u0);
        let mut r = libm::exp(-u0 * d - 0.5 * d * d);
        while k < count && grid[k] <= s + reach {
            out[k] += e;
            e *= r;
            r *= c;
            k += 1;
        }
    }
    let norm = FRAC_1_SQRT_2PI / (sorted.len() as f64 * bandwidth);
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

/// Uniform grid of `size` points on `[-c, c]`, where `c` is the largest
/// absolute return in either set plus `3 h` (at least `1e-3`).
pub fn symmetric_grid(predicted: &[f64], target: &[f64], size: usize, bandwidth: f64) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(domain(format!("grid needs at least 2 points, got {size}")));
    }
    let reach = predicted.iter().chain(target).fold(0.0f64, |m, y| m.max(y.abs()));
    if !reach.is_finite() {
        return Err(domain("returns must be finite"));
    }
    let c = (reach + 3.0 * bandwidth).max(1e-3);
    let step = 2.0 * c / (size - 1) as f64;
    let mut grid: Vec<f64> = (0..size).map(|i| -c + step * i as f64).collect();
    // mirror the lower half so the grid is exactly symmetric
    for i in 0..size / 2 {
        grid[size - 1 - i] = -grid[i];
    }
    if size % 2 == 1 {
        grid[size / 2] = 0.0;
    }
    Ok(grid)
}

/// Linear interpolation stencil: for each grid point, the two source indices
/// bracketing it and the weight of the upper one, or `None` outside the hull.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    stencil: Vec<Option<(usize, usize, f64)>>,
}

impl Interpolation {
    /// `xs` need not be sorted; ties are tolerated.
    pub fn new(xs: &[f64], grid: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut stencil = vec![None; grid.len()];
        if order.is_empty() {
            return Self { stencil };
        }
        let (first, last) = (xs[order[0]], xs[order[order.len() - 1]]);
        let mut k = 0;
        for (slot, &g) in stencil.iter_mut().zip(grid) {
            if g < first || g > last {
                continue;
            }
            if first == last {
                *slot = Some((order[0], order[0], 0.0));
                continue;
            }
            while k + 2 < order.len() && xs[order[k + 1]] < g {
                k += 1;
            }
            // skip zero-width segments
            while k + 2 < order.len() && xs[order[k + 1]] == xs[order[k]] {
                k += 1;
            }
            let (a, b) = (order[k], order[k + 1]);
            let (xa, xb) = (xs[a], xs[b]);
            let t = if xb > xa {
                ((g - xa) / (xb - xa)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            *slot = Some((a, b, t));
        }
        Self { stencil }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.stencil
            .iter()
            .map(|s| match *s {
                Some((a, b, t)) => (1.0 - t) * values[a] + t * values[b],
                None => 0.0,
            })
            .collect()
    }

    /// Transpose of [`Interpolation::apply`]: pull a grid gradient back onto
    /// the source values.
    pub fn pull_back(&self, grid_grad: &[f64], out: &mut [f64]) {
        for (s, &g) in self.stencil.iter().zip(grid_grad) {
            if let Some((a, b, t)) = *s {
                out[a] += (1.0 - t) * g;
                out[b] += t * g;
            }
        }
    }
}

/// Carry a predicted sample set (returns with analytic densities) and a
/// target sample set onto one symmetric uniform grid.
pub fn align(
    predicted_returns: &[f64],
    predicted_densities: &[f64],
    target: &TargetSampleSet,
    grid_size: usize,
    bandwidth: f64,
) -> Result<AlignedPair> {
    Ok(align_with_stencil(predicted_returns, predicted_densities, target, grid_size, bandwidth)?.0)
}

pub(crate) fn align_with_stencil(
    predicted_returns: &[f64],
    predicted_densities: &[f64],
    target: &TargetSampleSet,
    grid_size: usize,
    bandwidth: f64,
) -> Result<(AlignedPair, Interpolation)> {
    if predicted_returns.is_empty() || target.is_empty() {
        return Err(domain("alignment needs non-empty predicted and target samples"));
    }
    if predicted_returns.len() != predicted_densities.len() {
        return Err(Error::Dimension {
            expected: predicted_returns.len(),
            got: predicted_densities.len(),
        });
    }
    let grid = symmetric_grid(predicted_returns, &target.returns, grid_size, bandwidth)?;
    let stencil = Interpolation::new(predicted_returns, &grid);
    let predicted = stencil.apply(predicted_densities);
    let step = 2.0 * -grid[0] / (grid.len() - 1) as f64;
    let target_density = kde_on_uniform_grid(&target.returns, bandwidth, grid[0], step, grid.len())?;
    Ok((AlignedPair::new(grid, predicted, target_density)?, stencil))
}

/// Knobs shared by target construction and the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    pub gamma: f64,
    pub sigma_final: f64,
    pub bandwidth: f64,
    pub grid_size: usize,
}

/// Target sample set for one transition, read from the target network.
///
/// Non-terminal steps map `z_batch` through every action's next-state flow,
/// pick the action with the largest sample-mean return, and bootstrap its
/// samples. Terminal steps use [`terminal_target`].
pub fn target_samples(
    target_net: &NetworkParams,
    transition: &Transition,
    z_batch: &[f64],
    config: &TargetConfig,
) -> Result<TargetSampleSet> {
    if transition.done {
        return terminal_target(transition.reward, config.sigma_final, z_batch);
    }
    let flows = target_net.flows_for_state(transition.next_state)?;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (a, params) in flows.iter().enumerate() {
        let ys: Vec<f64> = z_batch.iter().map(|&z| params.map(z)).collect();
        let q = ys.iter().sum::<f64>() / ys.len() as f64;
        if best.as_ref().is_none_or(|b| q > b.0) {
            best = Some((q, a, ys));
        }
    }
    let (_, greedy, ys) = best.ok_or_else(|| domain("network has no actions"))?;
    if !(config.gamma > 0.0) {
        return Err(domain(format!("gamma must be positive, got {}", config.gamma)));
    }
    let params = &flows[greedy];
    let log_gamma = libm::log(config.gamma);
    let returns = ys.iter().map(|&y| transition.reward + config.gamma * y).collect();
    let log_densities = z_batch.iter().map(|&z| params.log_density(z) - log_gamma).collect();
    TargetSampleSet::new(returns, log_densities, false)
}

/// Aligned predicted/target pair for one transition. The predicted side comes
/// from `online`, the target side from `target_net`; target values are plain
/// numbers that carry no dependence on the online parameters.
pub fn build_target(
    online: &NetworkParams,
    target_net: &NetworkParams,
    transition: &Transition,
    z_batch: &[f64],
    config: &TargetConfig,
) -> Result<AlignedPair> {
    let flows = online.flows_for_state(transition.state)?;
    let params = flows.get(transition.action).ok_or(Error::Dimension {
        expected: flows.len(),
        got: transition.action + 1,
    })?;
    let mut ys = Vec::with_capacity(z_batch.len());
    let mut ds = Vec::with_capacity(z_batch.len());
    for &z in z_batch {
        let s = forward_sample(params, z)?;
        ys.push(s.y);
        ds.push(libm::exp(s.log_density));
    }
    let target = target_samples(target_net, transition, z_batch, config)?;
    align(&ys, &ds, &target, config.grid_size, config.bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::MixtureFlowParams;

    #[test]
    fn bootstrap_examples() {
        let next = ReturnSample {
            z: 0.3,
            y: 2.0,
            log_density: -1.7,
        };
        let (y, ld) = bootstrap_sample(&next, 1.0, 0.9).unwrap();
        assert!((y - 2.8).abs() < 1e-15);
        assert!((ld - (-1.7 - libm::log(0.9))).abs() < 1e-15);
        assert_eq!(bootstrap_sample(&next, 0.0, 1.0).unwrap(), (2.0, -1.7));
        assert!(bootstrap_sample(&next, 0.0, 0.0).is_err());
        assert!(bootstrap_sample(&next, 0.0, -0.5).is_err());

        // uniform 0.5 on (-1, 1) halved becomes uniform 1 on (-0.5, 0.5)
        let flow = MixtureFlowParams::standard(1.0).unwrap();
        for &z in &[-1.5, 0.2, 2.4] {
            let (y, ld) = bootstrap_sample(&forward_sample(&flow, z).unwrap(), 0.0, 0.5).unwrap();
            assert!(y.abs() < 0.5);
            assert!(libm::exp(ld) - 1.0 < 1e-12 && 1.0 - libm::exp(ld) < 1e-12);
        }
    }

    #[test]
    fn terminal_examples() {
        let t = terminal_target(0.8, 0.1, &[0.0, 1.0, -2.0]).unwrap();
        assert!(t.terminal);
        assert_eq!(t.returns[0], 0.8);
        let peak = 1.0 / (0.1 * (2.0 * core::f64::consts::PI).sqrt());
        assert!((libm::exp(t.log_densities[0]) - peak).abs() < 1e-12);
        assert!((peak - 3.989).abs() < 1e-3);
        for sigma in [1e-3, 0.5, 7.0] {
            assert_eq!(terminal_target(-1.25, sigma, &[0.0]).unwrap().returns[0], -1.25);
        }
        // quadrature of the terminal density over r +- 6 sigma
        let (r, s) = (0.8, 0.1);
        let n = 4001;
        let zs: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();
        let t = terminal_target(r, s, &zs).unwrap();
        let mass: f64 = (1..n)
            .map(|i| {
                let h = t.returns[i] - t.returns[i - 1];
                0.5 * h * (libm::exp(t.log_densities[i]) + libm::exp(t.log_densities[i - 1]))
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-3);
        assert!(terminal_target(0.0, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn kde_examples() {
        let v = kde_evaluate(&[0.0], 1.0, &[0.0]).unwrap();
        assert!((v[0] - 0.398942).abs() < 1e-6);
        let v = kde_evaluate(&[-1.0, 1.0], 1.0, &[0.0]).unwrap();
        let phi1 = libm::exp(-0.5) / (2.0 * core::f64::consts::PI).sqrt();
        assert!((v[0] - phi1).abs() < 1e-15);
        assert!((v[0] - 0.241971).abs() < 1e-6);
        let s = [0.3, -0.2, 1.1];
        let far = kde_evaluate(&s, 0.05, &[1.1 + 40.0 * 0.05]).unwrap();
        assert!(far[0] < 1e-12);
        assert!(kde_evaluate(&[], 1.0, &[0.0]).is_err());
        assert!(kde_evaluate(&[0.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn grid_recurrence_matches_direct_kde() {
        let samples = [0.31, -0.2, 1.1, 0.305, -0.77, 0.9];
        for (h, count) in [(0.05, 256), (0.2, 64), (0.001, 256), (0.01, 2000)] {
            let grid = symmetric_grid(&samples, &samples, count, h).unwrap();
            let step = 2.0 * -grid[0] / (count - 1) as f64;
            let fast = kde_on_uniform_grid(&samples, h, grid[0], step, count).unwrap();
            let slow = kde_evaluate(&samples, h, &grid).unwrap();
            let peak = slow.iter().copied().fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * peak, "{h} {a} {b}");
            }
        }
    }

    #[test]
    fn grid_is_symmetric_and_covering() {
        let g = symmetric_grid(&[-0.4, 1.2], &[2.5], 64, 0.05).unwrap();
        assert_eq!(g[0], -g[63]);
        assert!((g[63] - 2.65).abs() < 1e-12);
        let degenerate = symmetric_grid(&[0.0], &[0.0], 8, 1e-9).unwrap();
        assert!(degenerate[7] >= 1e-3);
        assert!(degenerate.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn interpolation_is_linear_and_zero_outside() {
        let xs = [1.0, -1.0, 0.0];
        let vs = [3.0, 1.0, 2.0];
        let grid = [-2.0, -1.0, -0.5, 0.25, 1.0, 1.5];
        let it = Interpolation::new(&xs, &grid);
        let out = it.apply(&vs);
        assert_eq!(out, vec![0.0, 1.0, 1.5, 2.25, 3.0, 0.0]);
        let mut back = [0.0; 3];
        it.pull_back(&[1.0; 6], &mut back);
        // adjoint identity <apply(v), g> = <v, pull_back(g)>
        let lhs: f64 = out.iter().sum();
        let rhs: f64 = back.iter().zip(&vs).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn identical_uniform_inputs_align() {
        let flow = MixtureFlowParams::standard(1.0).unwrap();
        // base draws at the quantiles that make the returns evenly spaced
        let n = 2000;
        let zs: Vec<f64> = (0..n)
            .map(|i| crate::flow::invert_flow(&flow, -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).unwrap())
            .collect();
        let samples: Vec<ReturnSample> = zs.iter().map(|&z| forward_sample(&flow, z).unwrap()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.y).collect();
        let ds: Vec<f64> = samples.iter().map(|s| libm::exp(s.log_density)).collect();
        let target = TargetSampleSet::new(ys.clone(), samples.iter().map(|s| s.log_density).collect(), false).unwrap();
        let pair = align(&ys, &ds, &target, 256, 0.05).unwrap();
        let s = pair.support();
        assert_eq!(s[0], -s[s.len() - 1]);
        // away from the edges the KDE only smooths a flat density
        for (i, &y) in s.iter().enumerate() {
            if y.abs() < 0.8 {
                assert!((pair.predicted()[i] - 0.5).abs() < 1e-9);
                assert!((pair.target()[i] - 0.5).abs() < 1e-3, "{y} {}", pair.target()[i]);
            }
        }
    }
}
