//! Conditional one-dimensional normalizing flow.
//!
//! A base draw `z ~ N(0, 1)` is pushed through the Gaussian-mixture CDF
//! `F(z) = sum_i w_i Phi((z - mu_i) / sigma_i)` and then through the affine
//! layer `u -> 2 u G - G`, so returns live in `(-G, G)`. The log-density of a
//! return follows from the change of variables:
//!
//! ```text
//! log p(y) = log phi(z) - log F'(z) - log(2 G)
//! ```
//!
//! `F'` is the mixture density, so both terms are closed-form. Inversion is a
//! bisection on the strictly increasing composed map.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{domain, Error, Result};
use crate::special::{log_sum_exp, normal_cdf, normal_log_pdf, normal_pdf, normal_sf};

/// Smallest admissible component scale. Smaller values are raised to it.
pub const MIN_SCALE: f64 = 1e-4;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const INITIAL_BRACKET: f64 = 10.0;
const MAX_BRACKET: f64 = 1e6;
const MAX_BISECTIONS: usize = 200;
/// Accuracy promised on the return value recovered by [`invert_flow`].
pub const INVERSION_TOL: f64 = 1e-10;

/// Gaussian-mixture CDF flow parameters for one state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFlowParams {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    g_max: f64,
}

impl MixtureFlowParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>, g_max: f64) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidParams("mixture needs at least one component".into()));
        }
        if means.len() != n || scales.len() != n {
            return Err(Error::InvalidParams(format!(
                "component vectors differ in length: {} weights, {} means, {} scales",
                n,
                means.len(),
                scales.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParams("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParams(format!("weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParams("means must be finite".into()));
        }
        if scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParams("scales must be finite and positive".into()));
        }
        if !g_max.is_finite() || g_max <= 0.0 {
            return Err(Error::InvalidParams(format!("g_max must be positive, got {g_max}")));
        }
        let scales = scales.into_iter().map(|s| s.max(MIN_SCALE)).collect();
        Ok(Self {
            weights,
            means,
            scales,
            g_max,
        })
    }

    /// Single standard-normal component: the flow maps the base onto the
    /// uniform density `1 / (2 G)` on `(-G, G)`.
    pub fn standard(g_max: f64) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![0.0], alloc::vec![1.0], g_max)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &m), &s)| (w, m, s))
    }

    fn cdf_unchecked(&self, z: f64) -> f64 {
        self.components().map(|(w, m, s)| w * normal_cdf((z - m) / s)).sum()
    }

    fn sf_unchecked(&self, z: f64) -> f64 {
        self.components().map(|(w, m, s)| w * normal_sf((z - m) / s)).sum()
    }

    /// Log of the mixture density, finite even where every component underflows.
    pub fn log_pdf(&self, z: f64) -> f64 {
        let mut terms = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if self.n_components() <= terms.len() {
            &mut terms[..self.n_components()]
        } else {
            heap = alloc::vec![0.0; self.n_components()];
            &mut heap
        };
        for (t, (w, m, s)) in buf.iter_mut().zip(self.components()) {
            *t = libm::log(w) + normal_log_pdf((z - m) / s) - libm::log(s);
        }
        log_sum_exp(buf)
    }

    /// Composed forward map `z -> y`. Above the median the complementary
    /// sum is used so returns close to `G` keep full relative precision.
    pub(crate) fn map(&self, z: f64) -> f64 {
        let f = self.cdf_unchecked(z);
        if f <= 0.5 {
            self.g_max * (2.0 * f - 1.0)
        } else {
            self.g_max * (1.0 - 2.0 * self.sf_unchecked(z))
        }
    }

    /// Log-density of the return produced by base draw `z`.
    pub(crate) fn log_density(&self, z: f64) -> f64 {
        normal_log_pdf(z) - self.log_pdf(z) - libm::log(2.0 * self.g_max)
    }
}

/// A base draw, the return it maps to, and the log-density there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnSample {
    pub z: f64,
    pub y: f64,
    pub log_density: f64,
}

fn check_finite(z: f64, what: &str) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{what} must be finite, got {z}")))
    }
}

/// `sum_i w_i Phi((z - mu_i) / sigma_i)`.
pub fn mixture_cdf(params: &MixtureFlowParams, z: f64) -> Result<f64> {
    check_finite(z, "z")?;
    Ok(params.cdf_unchecked(z))
}

/// `sum_i w_i phi((z - mu_i) / sigma_i) / sigma_i`, the z-derivative of [`mixture_cdf`].
pub fn mixture_pdf(params: &MixtureFlowParams, z: f64) -> Result<f64> {
    check_finite(z, "z")?;
    Ok(params
        .components()
        .map(|(w, m, s)| w * normal_pdf((z - m) / s) / s)
        .sum())
}

/// Affine layer `u -> 2 u G - G` taking `[0, 1]` onto `[-G, G]`.
pub fn rescale(u: f64, g_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(domain(format!("rescale expects u in [0, 1], got {u}")));
    }
    if !g_max.is_finite() || g_max <= 0.0 {
        return Err(domain(format!("g_max must be positive, got {g_max}")));
    }
    Ok(2.0 * u * g_max - g_max)
}

/// Push a base draw through the flow.
pub fn forward_sample(params: &MixtureFlowParams, z: f64) -> Result<ReturnSample> {
    check_finite(z, "z")?;
    Ok(ReturnSample {
        z,
        y: params.map(z),
        log_density: params.log_density(z),
    })
}

/// Base draw `z` whose return equals `y`, found by bisection.
///
/// The bracket starts at `[-10, 10]` and doubles until it straddles the
/// target. Bisection then runs until the bracket cannot shrink any further,
/// so the recovered `z` is as accurate as the floating-point representation
/// of `y` allows and `|forward(z) - y| <= 1e-10` whenever that is attainable.
pub fn invert_flow(params: &MixtureFlowParams, y: f64) -> Result<f64> {
    check_finite(y, "y")?;
    let g = params.g_max;
    if y <= -g || y >= g {
        return Err(Error::OutOfSupport { value: y, g_max: g });
    }
    let mut lo = -INITIAL_BRACKET;
    while params.map(lo) > y {
        lo *= 2.0;
        if lo < -MAX_BRACKET {
            return Err(Error::Convergence { target: y });
        }
    }
    let mut hi = INITIAL_BRACKET;
    while params.map(hi) < y {
        hi *= 2.0;
        if hi > MAX_BRACKET {
            return Err(Error::Convergence { target: y });
        }
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let ym = params.map(mid);
        if ym < y {
            lo = mid;
        } else if ym > y {
            hi = mid;
        } else {
            return Ok(mid);
        }
    }
    let (el, eh) = ((params.map(lo) - y).abs(), (params.map(hi) - y).abs());
    Ok(if el <= eh { lo } else { hi })
}

/// Density of the flow at return `y`; zero outside `(-G, G)`.
pub fn density_at(params: &MixtureFlowParams, y: f64) -> Result<f64> {
    check_finite(y, "y")?;
    if y <= -params.g_max || y >= params.g_max {
        return Ok(0.0);
    }
    let z = invert_flow(params, y)?;
    Ok(libm::exp(params.log_density(z)))
}

/// CDF of the flow's return distribution, `P(Y <= y) = Phi(z(y))`.
pub fn flow_cdf(params: &MixtureFlowParams, y: f64) -> Result<f64> {
    check_finite(y, "y")?;
    if y <= -params.g_max {
        return Ok(0.0);
    }
    if y >= params.g_max {
        return Ok(1.0);
    }
    Ok(normal_cdf(invert_flow(params, y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::PI;

    /// Maclaurin series for erf; independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    }

    fn phi_oracle(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / 2f64.sqrt()))
    }

    fn params(w: &[f64], m: &[f64], s: &[f64], g: f64) -> MixtureFlowParams {
        MixtureFlowParams::new(w.to_vec(), m.to_vec(), s.to_vec(), g).unwrap()
    }

    #[test]
    fn cdf_examples() {
        let std1 = params(&[1.0], &[0.0], &[1.0], 1.0);
        assert_eq!(mixture_cdf(&std1, 0.0).unwrap(), 0.5);
        let sym = params(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0], 1.0);
        assert!((mixture_cdf(&sym, 0.0).unwrap() - 0.5).abs() < 1e-16);
        let oracle = phi_oracle(1.959964);
        assert!((oracle - 0.975).abs() < 1e-6);
        assert!((mixture_cdf(&std1, 1.959964).unwrap() - oracle).abs() < 1e-12);
        assert!(mixture_cdf(&std1, f64::NAN).is_err());
        assert!(mixture_cdf(&std1, f64::INFINITY).is_err());
    }

    #[test]
    fn pdf_examples() {
        let std1 = params(&[1.0], &[0.0], &[1.0], 1.0);
        let expect = 1.0 / (2.0 * PI).sqrt();
        assert!((mixture_pdf(&std1, 0.0).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.3989423).abs() < 1e-7);
        let far = params(&[0.5, 0.5], &[-10.0, 10.0], &[0.1, 0.1], 1.0);
        assert!(mixture_pdf(&far, 0.0).unwrap() < 1e-30);
        // log-space stays finite where the linear sum underflows
        assert!(far.log_pdf(0.0).is_finite());
        let three = params(&[0.2, 0.5, 0.3], &[-0.4, 0.3, 1.5], &[0.6, 1.2, 0.3], 2.0);
        let h = 1e-5;
        let fd = (mixture_cdf(&three, 0.7 + h).unwrap() - mixture_cdf(&three, 0.7 - h).unwrap()) / (2.0 * h);
        assert!((fd - mixture_pdf(&three, 0.7).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale(0.5, 3.0).unwrap(), 0.0);
        assert_eq!(rescale(1.0, 3.0).unwrap(), 3.0);
        assert_eq!(rescale(0.25, 2.0).unwrap(), -1.0);
        assert!(rescale(1.5, 2.0).is_err());
        assert!(rescale(-0.1, 2.0).is_err());
    }

    #[test]
    fn standard_component_gives_uniform_density() {
        for &(g, expect) in &[(1.0, -core::f64::consts::LN_2), (5.0, -libm::log(10.0))] {
            let p = params(&[1.0], &[0.0], &[1.0], g);
            for &z in &[-3.0, -0.2, 0.0, 1.1, 4.0] {
                let s = forward_sample(&p, z).unwrap();
                assert!((s.log_density - expect).abs() < 1e-12, "z={z}");
                assert!(s.y > -g && s.y < g);
                let via_rescale = rescale(mixture_cdf(&p, z).unwrap(), g).unwrap();
                assert!((s.y - via_rescale).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inversion_examples() {
        let sym = params(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0], 2.0);
        assert!(invert_flow(&sym, 0.0).unwrap().abs() < 1e-12);

        let p = params(&[0.3, 0.7], &[-0.5, 0.8], &[0.7, 1.4], 3.0);
        let y = forward_sample(&p, 1.3).unwrap().y;
        assert!((invert_flow(&p, y).unwrap() - 1.3).abs() < 1e-9);

        // Phi^-1(0.95) located by bisection on the series oracle.
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi_oracle(mid) < 0.95 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((lo - 1.644854).abs() < 1e-6);
        let std1 = params(&[1.0], &[0.0], &[1.0], 1.0);
        let z = invert_flow(&std1, 0.9).unwrap();
        assert!((z - lo).abs() < 1e-9);
        assert!((forward_sample(&std1, z).unwrap().y - 0.9).abs() <= INVERSION_TOL);
    }

    #[test]
    fn inversion_errors() {
        let p = params(&[1.0], &[0.0], &[1.0], 2.0);
        assert!(matches!(invert_flow(&p, 2.0), Err(Error::OutOfSupport { .. })));
        assert!(matches!(invert_flow(&p, -2.5), Err(Error::OutOfSupport { .. })));
        // Huge scale: the map never climbs above ~0 inside |z| <= 1e6.
        let wide = params(&[1.0], &[0.0], &[1e9], 2.0);
        assert!(matches!(invert_flow(&wide, 1.5), Err(Error::Convergence { .. })));
    }

    #[test]
    fn density_examples() {
        let p = params(&[1.0], &[0.0], &[1.0], 1.0);
        assert_eq!(density_at(&p, 2.0).unwrap(), 0.0);
        assert!((density_at(&p, 0.3).unwrap() - 0.5).abs() < 1e-12);
        let q = params(&[0.25, 0.45, 0.3], &[-0.8, 0.1, 0.9], &[1.6, 2.0, 1.7], 2.5);
        for &z in &[-2.0, -0.5, 0.0, 0.4, 1.7] {
            let s = forward_sample(&q, z).unwrap();
            assert!((density_at(&q, s.y).unwrap() - libm::exp(s.log_density)).abs() < 1e-8);
        }
    }

    #[test]
    fn normalization_by_trapezoid() {
        let p = params(
            &[0.1, 0.2, 0.3, 0.4],
            &[-0.9, -0.2, 0.4, 1.0],
            &[1.5, 2.2, 1.8, 2.9],
            3.0,
        );
        let n = 10_000;
        let g = p.g_max();
        let h = 2.0 * g / (n - 1) as f64;
        let ys: Vec<f64> = (0..n).map(|i| -g + h * i as f64).collect();
        let ds: Vec<f64> = ys.iter().map(|&y| density_at(&p, y).unwrap()).collect();
        let mass: f64 = ds.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn constructor_validation() {
        assert!(MixtureFlowParams::new(vec![], vec![], vec![], 1.0).is_err());
        assert!(MixtureFlowParams::new(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0], 1.0).is_err());
        assert!(MixtureFlowParams::new(vec![1.0], vec![0.0], vec![0.0], 1.0).is_err());
        assert!(MixtureFlowParams::new(vec![1.0], vec![0.0], vec![1.0], 0.0).is_err());
        assert!(MixtureFlowParams::new(vec![1.0], vec![0.0, 1.0], vec![1.0], 1.0).is_err());
        let floored = MixtureFlowParams::new(vec![1.0], vec![0.0], vec![1e-9], 1.0).unwrap();
        assert_eq!(floored.scales()[0], MIN_SCALE);
    }

    #[test]
    fn flow_cdf_is_consistent_with_base() {
        let p = params(&[0.6, 0.4], &[-0.3, 0.9], &[1.1, 0.8], 2.0);
        for &z in &[-2.0, 0.0, 1.0] {
            let y = forward_sample(&p, z).unwrap().y;
            assert!((flow_cdf(&p, y).unwrap() - normal_cdf(z)).abs() < 1e-9);
        }
        assert_eq!(flow_cdf(&p, -2.0).unwrap(), 0.0);
        assert_eq!(flow_cdf(&p, 7.0).unwrap(), 1.0);
    }
}
