//! Mechanical checks of the metric properties of the surrogate Cramér loss,
//! its behaviour under translation, scaling and bootstrap pushforward, the
//! unbiasedness of its sample gradients, and the sample-count study.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::agent::{train, TrainConfig};
use crate::envs::TabularMdp;
use crate::error::{domain, Result};
use crate::loss::{exact_cramer, surrogate_cramer, surrogate_radicand, surrogate_weights};
use crate::special::softmax_into;
use crate::target::AlignedPair;
use crate::Rng;

/// Tolerance shared by the algebraic properties.
pub const ALGEBRA_TOL: f64 = 1e-12;
/// Resolution of the parameter grid in the Bernoulli experiment.
pub const BERNOULLI_GRID_STEP: f64 = 1e-3;

/// Outcome of one mechanically checked property.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PropertyReport {
    pub property: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl PropertyReport {
    pub fn new(property: &str, trials: usize, max_violation: f64, tolerance: f64) -> Self {
        Self {
            property: property.into(),
            trials,
            max_violation,
            tolerance,
            pass: max_violation <= tolerance,
        }
    }
}

fn surrogate(support: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let pair = AlignedPair::new(support.to_vec(), p.to_vec(), q.to_vec()).expect("valid random pair");
    surrogate_cramer(&pair).value
}

/// Softmax of Gaussian noise, scaled so it integrates to roughly one over a
/// support of the given width.
fn random_density(n: usize, width: f64, rng: &mut Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; n];
    softmax_into(&noise, &mut out);
    let scale = n as f64 / width.max(1e-12);
    out.iter_mut().for_each(|d| *d *= scale);
    out
}

/// Sorted distinct random support of 32 to 256 points.
fn random_support(rng: &mut Rng) -> Vec<f64> {
    let n = rng.random_range(32..=256);
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

/// Sorted distinct support on the lattice `k / 4096`, so that dyadic shifts
/// and power-of-two scalings are exact in floating point.
fn lattice_support(rng: &mut Rng) -> Vec<f64> {
    let n = rng.random_range(32..=256);
    let mut ks: Vec<i64> = (0..n).map(|_| rng.random_range(-20_000..20_000)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter().map(|k| k as f64 / 4096.0).collect()
}

/// Non-negativity, symmetry, identity of indiscernibles and the triangle
/// inequality of the surrogate over random density triples.
pub fn check_metric_axioms(n_trials: usize, rng: &mut Rng) -> PropertyReport {
    let mut worst = 0.0f64;
    for _ in 0..n_trials {
        let s = random_support(rng);
        let width = s[s.len() - 1] - s[0];
        let a = random_density(s.len(), width, rng);
        let b = random_density(s.len(), width, rng);
        let c = random_density(s.len(), width, rng);
        let (ab, ba, bc, ac) = (
            surrogate(&s, &a, &b),
            surrogate(&s, &b, &a),
            surrogate(&s, &b, &c),
            surrogate(&s, &a, &c),
        );
        worst = worst.max(-ab.min(bc).min(ac));
        worst = worst.max((ab - ba).abs());
        worst = worst.max(surrogate(&s, &a, &a));
        if ab == 0.0 {
            worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        worst = worst.max(ac - (ab + bc));
    }
    PropertyReport::new("metric_axioms", n_trials, worst, ALGEBRA_TOL)
}

/// Shifting the support leaves the surrogate bit-identical when the shift
/// and support are exactly representable, and within round-off otherwise.
pub fn check_translation(n_trials: usize, rng: &mut Rng) -> PropertyReport {
    let mut worst = 0.0f64;
    for _ in 0..n_trials {
        let s = lattice_support(rng);
        let width = s[s.len() - 1] - s[0];
        let (p, q) = (random_density(s.len(), width, rng), random_density(s.len(), width, rng));
        let d = surrogate(&s, &p, &q);
        let exact_shift = rng.random_range(-80_000i64..80_000) as f64 / 4096.0;
        let shifted: Vec<f64> = s.iter().map(|y| y + exact_shift).collect();
        let lattice_gap = (surrogate(&shifted, &p, &q) - d).abs();
        if lattice_gap != 0.0 {
            worst = f64::INFINITY;
        }
        let b: f64 = rng.random_range(-20.0..20.0);
        let shifted: Vec<f64> = s.iter().map(|y| y + b).collect();
        worst = worst.max((surrogate(&shifted, &p, &q) - d).abs() / d);
    }
    PropertyReport::new("translation_invariance", n_trials, worst, ALGEBRA_TOL)
}

/// Scale factors checked by [`check_scaling`].
pub const SCALE_FACTORS: [f64; 4] = [0.25, 0.5, 2.0, 4.0];

/// Pushforward `y -> a y`, `p -> p / |a|` multiplies the surrogate by
/// `|a|^(-1/2)`.
pub fn check_scaling(n_trials: usize, rng: &mut Rng) -> PropertyReport {
    let mut worst = 0.0f64;
    for _ in 0..n_trials {
        let s = lattice_support(rng);
        let width = s[s.len() - 1] - s[0];
        let (p, q) = (random_density(s.len(), width, rng), random_density(s.len(), width, rng));
        let d = surrogate(&s, &p, &q);
        for a in SCALE_FACTORS {
            let (ss, ps, qs) = pushforward(&s, &p, &q, 0.0, a);
            let expected = d / libm::sqrt(a.abs());
            worst = worst.max((surrogate(&ss, &ps, &qs) - expected).abs() / expected);
        }
    }
    PropertyReport::new("pushforward_scaling", n_trials, worst, ALGEBRA_TOL)
}

/// Image of a density pair under `y -> r + a y`. Negative `a` reverses the
/// support so it stays increasing.
fn pushforward(s: &[f64], p: &[f64], q: &[f64], r: f64, a: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut ss: Vec<f64> = s.iter().map(|y| r + a * y).collect();
    let mut ps: Vec<f64> = p.iter().map(|d| d / a.abs()).collect();
    let mut qs: Vec<f64> = q.iter().map(|d| d / a.abs()).collect();
    if a < 0.0 {
        ss.reverse();
        ps.reverse();
        qs.reverse();
    }
    (ss, ps, qs)
}

/// Empirical distance ratio of the surrogate under the bootstrap
/// pushforward at one discount.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingRow {
    pub gamma: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Whether every observed ratio was at most `gamma`.
    pub contracts: bool,
}

/// Apply `y -> r + gamma y` to random density pairs and record how the
/// surrogate distance changes.
pub fn measure_bellman_scaling(gammas: &[f64], n_trials: usize, rng: &mut Rng) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(domain("gamma must lie in (0, 1]"));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n_trials {
            let s = random_support(rng);
            let width = s[s.len() - 1] - s[0];
            let (p, q) = (random_density(s.len(), width, rng), random_density(s.len(), width, rng));
            let r: f64 = rng.random_range(-3.0..3.0);
            let (ss, ps, qs) = pushforward(&s, &p, &q, r, gamma);
            let ratio = surrogate(&ss, &ps, &qs) / surrogate(&s, &p, &q);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        rows.push(ScalingRow {
            gamma,
            min_ratio: lo,
            max_ratio: hi,
            contracts: hi <= gamma,
        });
    }
    Ok(rows)
}

/// Discounts used by the bootstrap pushforward checks.
pub const BELLMAN_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];

/// The surrogate ratio under bootstrap pushforward equals `gamma^(-1/2)`,
/// independent of the reward shift.
pub fn check_bellman_scaling(n_trials: usize, rng: &mut Rng) -> Result<PropertyReport> {
    let rows = measure_bellman_scaling(&BELLMAN_GAMMAS, n_trials, rng)?;
    let worst = rows
        .iter()
        .map(|r| {
            let expected = 1.0 / libm::sqrt(r.gamma);
            ((r.max_ratio - expected).abs()).max((r.min_ratio - expected).abs()) / expected
        })
        .fold(0.0, f64::max);
    Ok(PropertyReport::new(
        "bootstrap_scaling_surrogate",
        n_trials,
        worst,
        1e-9,
    ))
}

/// The exact Cramér distance of order 2 contracts by at most `gamma^(1/2)`
/// under the bootstrap pushforward.
pub fn check_exact_contraction(n_trials: usize, rng: &mut Rng) -> PropertyReport {
    let mut worst = 0.0f64;
    for _ in 0..n_trials {
        let s = random_support(rng);
        let width = s[s.len() - 1] - s[0];
        let (p, q) = (random_density(s.len(), width, rng), random_density(s.len(), width, rng));
        let before = exact_cramer(
            &AlignedPair::new(s.clone(), p.clone(), q.clone()).expect("valid pair"),
            2.0,
        )
        .value;
        for gamma in BELLMAN_GAMMAS {
            let r: f64 = rng.random_range(-3.0..3.0);
            let (ss, ps, qs) = pushforward(&s, &p, &q, r, gamma);
            let after = exact_cramer(&AlignedPair::new(ss, ps, qs).expect("valid pair"), 2.0).value;
            worst = worst.max(after / before - libm::sqrt(gamma));
        }
    }
    PropertyReport::new("exact_cramer_contraction", n_trials, worst.max(0.0), 1e-9)
}

/// Minimizers found by [`bernoulli_unbiasedness`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliResult {
    /// Minimizer of the expected squared surrogate between the model and the
    /// empirical law of `m` samples.
    pub argmin_sample: f64,
    /// Minimizer of the squared surrogate between the model and the truth.
    pub argmin_true: f64,
    /// Minimizer of the expected unsquared surrogate. It sits at a median of
    /// the sample mean, so it is biased for most `theta*`.
    pub argmin_sample_root: f64,
    /// Largest value of `true - expected sample loss` over the grid.
    pub max_shortfall: f64,
}

fn binomial_pmf(m: usize, k: usize, theta: f64) -> f64 {
    let mut log_c = 0.0;
    for i in 0..k {
        log_c += libm::log((m - i) as f64) - libm::log((i + 1) as f64);
    }
    let mut p = libm::exp(log_c);
    p *= libm::pow(theta, k as f64) * libm::pow(1.0 - theta, (m - k) as f64);
    p
}

/// Surrogate between Bernoulli(theta) and Bernoulli(other) as densities on
/// the support {0, 1}; squared unless `root`.
fn bernoulli_loss(theta: f64, other: f64, root: bool) -> f64 {
    let pred = [1.0 - theta, theta];
    let target = [1.0 - other, other];
    let w = surrogate_weights(&[0.0, 1.0]);
    let radicand = surrogate_radicand(&pred, &target, &w);
    if root {
        libm::sqrt(radicand) / 4.0
    } else {
        radicand
    }
}

/// Compare the minimizer of the expected sample loss, computed by exact
/// enumeration of every `m`-sample outcome, with the minimizer of the true
/// loss over a grid of `theta` with step `1e-3`.
pub fn bernoulli_unbiasedness(theta_star: f64, m: usize) -> Result<BernoulliResult> {
    if !(0.0..=1.0).contains(&theta_star) || m == 0 {
        return Err(domain("need theta* in [0, 1] and at least one sample"));
    }
    let steps = libm::round(1.0 / BERNOULLI_GRID_STEP) as usize;
    let outcomes: Vec<(f64, f64)> = (0..=m)
        .map(|k| (k as f64 / m as f64, binomial_pmf(m, k, theta_star)))
        .collect();
    let mut best_sample = (f64::INFINITY, 0.0);
    let mut best_true = (f64::INFINITY, 0.0);
    let mut best_root = (f64::INFINITY, 0.0);
    let mut shortfall = f64::NEG_INFINITY;
    for i in 0..=steps {
        let theta = i as f64 / steps as f64;
        let expected: f64 = outcomes
            .iter()
            .map(|&(hat, w)| w * bernoulli_loss(theta, hat, false))
            .sum();
        let expected_root: f64 = outcomes
            .iter()
            .map(|&(hat, w)| w * bernoulli_loss(theta, hat, true))
            .sum();
        let truth = bernoulli_loss(theta, theta_star, false);
        shortfall = shortfall.max(truth - expected);
        if expected < best_sample.0 {
            best_sample = (expected, theta);
        }
        if truth < best_true.0 {
            best_true = (truth, theta);
        }
        if expected_root < best_root.0 {
            best_root = (expected_root, theta);
        }
    }
    Ok(BernoulliResult {
        argmin_sample: best_sample.1,
        argmin_true: best_true.1,
        argmin_sample_root: best_root.1,
        max_shortfall: shortfall,
    })
}

pub const BERNOULLI_THETAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const BERNOULLI_SAMPLE_SIZES: [usize; 4] = [1, 2, 5, 10];

/// Both minimizers equal `theta*` within grid resolution for every
/// combination of [`BERNOULLI_THETAS`] and [`BERNOULLI_SAMPLE_SIZES`].
pub fn check_bernoulli_unbiasedness() -> Result<PropertyReport> {
    let mut worst = 0.0f64;
    let mut trials = 0;
    for theta in BERNOULLI_THETAS {
        for m in BERNOULLI_SAMPLE_SIZES {
            let r = bernoulli_unbiasedness(theta, m)?;
            worst = worst
                .max((r.argmin_sample - theta).abs())
                .max((r.argmin_true - theta).abs());
            trials += 1;
        }
    }
    Ok(PropertyReport::new(
        "bernoulli_unbiased_argmin",
        trials,
        worst,
        BERNOULLI_GRID_STEP,
    ))
}

/// The expected sample loss dominates the true loss at every grid point.
pub fn check_bernoulli_dominance() -> Result<PropertyReport> {
    let mut worst = f64::NEG_INFINITY;
    let mut trials = 0;
    for theta in BERNOULLI_THETAS {
        for m in BERNOULLI_SAMPLE_SIZES {
            worst = worst.max(bernoulli_unbiasedness(theta, m)?.max_shortfall);
            trials += 1;
        }
    }
    Ok(PropertyReport::new(
        "bernoulli_sample_loss_dominates",
        trials,
        worst.max(0.0),
        0.0,
    ))
}

/// Every asserted property, in a fixed order.
pub fn run_all(n_trials: usize, rng: &mut Rng) -> Result<Vec<PropertyReport>> {
    if n_trials == 0 {
        return Err(domain("need at least one trial"));
    }
    Ok(vec![
        check_metric_axioms(n_trials, rng),
        check_translation(n_trials, rng),
        check_scaling(n_trials, rng),
        check_bellman_scaling(n_trials, rng)?,
        check_exact_contraction(n_trials, rng),
        check_bernoulli_unbiasedness()?,
        check_bernoulli_dominance()?,
    ])
}

/// One row of the sample-count study.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleCountRow {
    pub n_samples: usize,
    pub mean_cramer: f64,
}

/// Train once per `(n_samples, repeat)` with seeds `config.seed + repeat`
/// and average the final evaluation distance over repeats.
pub fn sample_count_study(
    mdp: &TabularMdp,
    n_samples: &[usize],
    repeats: usize,
    config: &TrainConfig,
) -> Result<Vec<SampleCountRow>> {
    if repeats == 0 {
        return Err(domain("need at least one repeat"));
    }
    if n_samples.windows(2).any(|w| w[1] < w[0]) {
        return Err(domain("sample counts must be sorted ascending"));
    }
    let mut rows = Vec::with_capacity(n_samples.len());
    for &n in n_samples {
        let mut total = 0.0;
        for r in 0..repeats {
            let cfg = TrainConfig {
                n_samples: n,
                seed: config.seed + r as u64,
                ..config.clone()
            };
            let out = train(mdp, &cfg)?;
            total += out.metrics.last().map_or(f64::NAN, |m| m.eval_cramer_mean);
        }
        rows.push(SampleCountRow {
            n_samples: n,
            mean_cramer: total / repeats as f64,
        });
    }
    Ok(rows)
}
