//! Closed-form combinatorics and binomial machinery behind the pooled test.
//!
//! Notation: `m` genes, subsets of size `k`, `r` randomizations, per-test
//! level `eta`, type-II budget `beta`, and `d` the hypothesized number of
//! DE-detectable genes.
//!
//! * `kappa = 1 - k/m` is the chance that a random subset avoids a gene.
//! * `pi0(d)` / `pi1(d)` are the chances that a subset avoiding gene `j`
//!   still contains a DE gene, when `j` is invariant / DE.
//! * `theta0 = kappa (eta (1 - pi0) + pi0)` bounds the per-randomization
//!   detection rate of an invariant gene; `theta1 = kappa (1 - beta)(1 - pi1)`
//!   lower-bounds it for a DE gene.

use crate::error::{Error, Result};
use crate::special::ln_choose;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub m: usize,
    pub k: usize,
    pub r: u64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub xi: f64,
}

impl DesignParams {
    /// Settings of the reference simulation study (`m = 500`, `k = 10`,
    /// `r = 2500`, `eta = alpha = 0.05`, `beta = 0.1`, `c = 2`).
    pub fn reference() -> Self {
        DesignParams {
            m: 500,
            k: 10,
            r: 2500,
            eta: 0.05,
            alpha: 0.05,
            beta: 0.10,
            c: 2.0,
            xi: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k >= self.m {
            return Err(Error::Config(format!(
                "subset size k = {} must satisfy 1 <= k <= m - 1 (m = {})",
                self.k, self.m
            )));
        }
        if self.r < 1 {
            return Err(Error::Config("number of randomizations r must be at least 1".into()));
        }
        for (name, v) in [("eta", self.eta), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c = {} must be positive", self.c)));
        }
        if !(self.xi > 0.0 && self.xi < 0.5) {
            return Err(Error::Config(format!("xi = {} must lie in (0, 0.5)", self.xi)));
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        1.0 - self.k as f64 / self.m as f64
    }

    pub fn with_m(self, m: usize) -> Self {
        DesignParams { m, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub theta0: f64,
    pub theta1: f64,
    pub d: usize,
}

impl RateBounds {
    pub fn separated(&self) -> bool {
        self.theta1 > self.theta0
    }
}

pub fn kappa(m: usize, k: usize) -> Result<f64> {
    if k < 1 || k >= m {
        return Err(Error::Domain(format!("kappa needs 1 <= k < m, got m = {m}, k = {k}")));
    }
    Ok(1.0 - k as f64 / m as f64)
}

/// `ln(C(a, k) / C(m - 1, k))` for `a <= m - 1`.
///
/// Small `k` uses `sum_i ln(1 - (m - 1 - a) / (m - 1 - i))`, which is exact
/// at `a = m - 1` and avoids cancellation between two large log-gammas.
fn ln_choose_ratio(a: usize, m: usize, k: usize) -> f64 {
    let gap = (m - 1 - a) as f64;
    if k <= 256 {
        (0..k).map(|i| (-gap / (m - 1 - i) as f64).ln_1p()).sum()
    } else {
        ln_choose(a as u64, k as u64) - ln_choose((m - 1) as u64, k as u64)
    }
}

/// Probability that a subset avoiding an invariant gene hits one of `d` DE genes.
pub fn pi0(m: usize, k: usize, d: usize) -> f64 {
    if d + k < m {
        -ln_choose_ratio(m - d - 1, m, k).exp_m1()
    } else {
        1.0
    }
}

/// Probability that a subset avoiding a DE gene hits one of the other `d - 1`.
pub fn pi1(m: usize, k: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else if d + k <= m {
        -ln_choose_ratio(m - d, m, k).exp_m1()
    } else {
        1.0
    }
}

/// Per-randomization detection-rate bound of an invariant gene.
pub fn theta0(params: &DesignParams, d: usize) -> f64 {
    let p0 = pi0(params.m, params.k, d);
    params.kappa() * (params.eta * (1.0 - p0) + p0)
}

pub fn rate_bounds(params: &DesignParams, d: usize) -> RateBounds {
    let p1 = pi1(params.m, params.k, d);
    RateBounds {
        theta0: theta0(params, d),
        theta1: params.kappa() * (1.0 - params.beta) * (1.0 - p1),
        d,
    }
}

/// `(1 - beta)(1 - pi1(d)) > eta (1 - pi0(d)) + pi0(d)`: the detection rate
/// of a DE gene still exceeds that of an invariant gene when `d` genes are DE.
pub fn rates_separate(params: &DesignParams, d: usize) -> bool {
    let p0 = pi0(params.m, params.k, d);
    let p1 = pi1(params.m, params.k, d);
    (1.0 - params.beta) * (1.0 - p1) > params.eta * (1.0 - p0) + p0
}

/// Largest `d` for which the rates still separate; caps the detections per
/// step-down pass.
pub fn delta_cap(params: &DesignParams) -> Result<usize> {
    if !rates_separate(params, 0) {
        let b = rate_bounds(params, 0);
        return Err(Error::Underpowered {
            theta0: b.theta0,
            theta1: b.theta1,
        });
    }
    // The left side decreases and the right side increases in d, so the
    // first failure ends the scan.
    let mut d = 0;
    while d < params.m && rates_separate(params, d + 1) {
        d += 1;
    }
    debug_assert!(!rates_separate(params, d + 1));
    Ok(d)
}

/// `P(Bin(n, p) <= x)`.
pub fn binom_cdf(x: i64, n: u64, p: f64) -> f64 {
    if x < 0 {
        return 0.0;
    }
    let x = x as u64;
    if x >= n || p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    if (x as f64) < n as f64 * p {
        lower_tail(x, n, p)
    } else {
        1.0 - upper_tail(x + 1, n, p)
    }
}

/// `P(Bin(n, p) > x)`, summed directly on the small side.
pub fn binom_sf(x: i64, n: u64, p: f64) -> f64 {
    if x < 0 {
        return 1.0;
    }
    let x = x as u64;
    if x >= n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    if (x + 1) as f64 > n as f64 * p {
        upper_tail(x + 1, n, p)
    } else {
        1.0 - lower_tail(x, n, p)
    }
}

fn ln_pmf(x: u64, n: u64, p: f64) -> f64 {
    ln_choose(n, x) + x as f64 * p.ln() + (n - x) as f64 * (-p).ln_1p()
}

/// `sum_{i <= x} pmf(i)` for `x` below the mean, walking down from `x`.
fn lower_tail(x: u64, n: u64, p: f64) -> f64 {
    let odds = (1.0 - p) / p;
    let mut term = ln_pmf(x, n, p).exp();
    let mut sum = term;
    let mut i = x;
    while i > 0 && term > sum * 1e-17 {
        term *= i as f64 / (n - i + 1) as f64 * odds;
        sum += term;
        i -= 1;
    }
    sum
}

/// `sum_{i >= x} pmf(i)` for `x` above the mean, walking up from `x`.
fn upper_tail(x: u64, n: u64, p: f64) -> f64 {
    let odds = p / (1.0 - p);
    let mut term = ln_pmf(x, n, p).exp();
    let mut sum = term;
    let mut i = x;
    while i < n && term > sum * 1e-17 {
        term *= (n - i) as f64 / (i + 1) as f64 * odds;
        sum += term;
        i += 1;
    }
    sum
}

/// p-value of `detections` rejections out of `r` randomizations when `d`
/// genes are DE: the upper binomial tail at `theta0(d)`.
pub fn pooled_p_value(detections: u64, params: &DesignParams, d: usize) -> f64 {
    binom_sf(detections as i64, params.r, theta0(params, d))
}

/// Massart's bound on `P(Bin(n, p) - n p > n eps)`.
pub fn massart_tail(n: u64, p: f64, eps: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("massart_tail needs 0 < p < 1, got {p}")));
    }
    if !(eps > 0.0 && eps < 1.0 - p) {
        return Err(Error::Domain(format!(
            "massart_tail needs 0 < eps < 1 - p, got eps = {eps}, p = {p}"
        )));
    }
    let a = p + eps / 3.0;
    Ok((-(n as f64) * eps * eps / (2.0 * a * (1.0 - a))).exp())
}

/// The three lower bounds on `r` and the resulting requirement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationBudget {
    /// Keeps the deviation scale below `theta0`.
    pub deviation_term: f64,
    /// Union bound over `m` genes at FWER `alpha`.
    pub fwer_term: f64,
    /// Separation of the two rates for exponential power.
    pub power_term: f64,
    pub required: u64,
}

fn budget(terms: [f64; 3]) -> RandomizationBudget {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    RandomizationBudget {
        deviation_term: terms[0],
        fwer_term: terms[1],
        power_term: terms[2],
        required: max.ceil().max(1.0) as u64,
    }
}

fn separated_bounds(params: &DesignParams, d: usize) -> Result<RateBounds> {
    let bounds = rate_bounds(params, d);
    if !bounds.separated() {
        return Err(Error::Underpowered {
            theta0: bounds.theta0,
            theta1: bounds.theta1,
        });
    }
    Ok(bounds)
}

/// Smallest `r` giving FWER `alpha` with exponentially growing power, with
/// the deviation exponent fixed at 1/4:
/// `r >= 1/sqrt(theta0) ∨ (-8/3 ln(alpha/m))^2 ∨ (2 sqrt(theta0)/(theta1 - theta0))^4`.
pub fn min_randomizations(params: &DesignParams, d: usize) -> Result<RandomizationBudget> {
    let RateBounds { theta0, theta1, .. } = separated_bounds(params, d)?;
    let log_term = -8.0 / 3.0 * (params.alpha / params.m as f64).ln();
    Ok(budget([
        1.0 / theta0.sqrt(),
        log_term.powi(2),
        (2.0 * theta0.sqrt() / (theta1 - theta0)).powi(4),
    ]))
}

/// Generic-exponent form:
/// `r >= theta0^(1/(2 xi - 1)) ∨ (-8/3 ln(alpha/m))^(1/(2 xi)) ∨ (2 sqrt(theta0)/(theta1 - theta0))^(1/(1/2 - xi))`.
pub fn min_randomizations_generic(params: &DesignParams, d: usize, xi: f64) -> Result<RandomizationBudget> {
    if !(xi > 0.0 && xi < 0.5) {
        return Err(Error::Domain(format!("xi = {xi} must lie in (0, 0.5)")));
    }
    let RateBounds { theta0, theta1, .. } = separated_bounds(params, d)?;
    let log_term = -8.0 / 3.0 * (params.alpha / params.m as f64).ln();
    Ok(budget([
        theta0.powf(1.0 / (2.0 * xi - 1.0)),
        log_term.powf(1.0 / (2.0 * xi)),
        (2.0 * theta0.sqrt() / (theta1 - theta0)).powf(1.0 / (0.5 - xi)),
    ]))
}
