//! The per-gene test run inside every randomization.
//!
//! Counts are stabilized as `Y_i = 2 sqrt(X_i / s_i)`, the group means are
//! compared, and the difference is scaled by
//! `sigma_hat^2 = sum_A (Y - mean_A)^2 / (n_A (n_A - 1)) + (same for B)`.
//! The gene is rejected when `|T|` exceeds the inflated normal quantile
//! `(1 + sqrt(c ln n)) z_{1 - eta/2}`.

use crate::count_data::{CountMatrix, GroupIndex};
use crate::error::{Error, Result};
use crate::scaling::{scaling_deviation_bound, ScalingFactors};
use crate::special::normal_upper_quantile;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    pub eta: f64,
    /// Quantile inflation; 0 gives the plain normal quantile.
    pub c: f64,
    pub n: usize,
    pub n_a: usize,
    pub n_b: usize,
}

impl TestParams {
    pub fn for_matrix(data: &CountMatrix, eta: f64, c: f64) -> Result<Self> {
        let p = TestParams {
            eta,
            c,
            n: data.n_samples(),
            n_a: data.n_a(),
            n_b: data.n_b(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta = {} must lie in (0, 1)", self.eta)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c = {} must be non-negative", self.c)));
        }
        if self.n_a < 2 || self.n_b < 2 || self.n_a + self.n_b != self.n {
            return Err(Error::Validation(format!(
                "group sizes n_A = {}, n_B = {} (n = {}) need at least 2 per group",
                self.n_a, self.n_b, self.n
            )));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        rejection_threshold(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneTestOutcome {
    pub t_value: f64,
    pub sigma_hat: f64,
    pub rejected: bool,
}

/// `Y_i = 2 sqrt(X_ij / s_i)`.
pub fn stabilize(data: &CountMatrix, s: &ScalingFactors, gene: usize) -> Vec<f64> {
    data.root_row(gene)
        .iter()
        .zip(s.values())
        .map(|(r, si)| 2.0 * r / si.sqrt())
        .collect()
}

/// Group mean and sum of squared deviations, two-pass.
#[inline]
fn group_moments(idx: &[usize], y: impl Fn(usize) -> f64) -> (f64, f64) {
    let mean = idx.iter().map(|&i| y(i)).sum::<f64>() / idx.len() as f64;
    let ss = idx.iter().map(|&i| (y(i) - mean).powi(2)).sum::<f64>();
    (mean, ss)
}

/// Mean difference and squared standard error, or `None` when both groups
/// are constant.
#[inline]
fn moments(groups: &GroupIndex, y: impl Fn(usize) -> f64 + Copy) -> Option<(f64, f64)> {
    let (mean_a, ss_a) = group_moments(&groups.a, y);
    let (mean_b, ss_b) = group_moments(&groups.b, y);
    let na = groups.a.len() as f64;
    let nb = groups.b.len() as f64;
    let var = ss_a / (na * (na - 1.0)) + ss_b / (nb * (nb - 1.0));
    // identical values can leave rounding residue in the deviations
    let scale = mean_a * mean_a + mean_b * mean_b;
    if var <= 1e-26 * scale || var <= 0.0 {
        return None;
    }
    Some((mean_a - mean_b, var))
}

/// Two-group standard error of the mean difference; `None` signals a
/// degenerate (zero) variance.
pub fn sigma_hat(y: &[f64], groups: &GroupIndex) -> Option<f64> {
    moments(groups, |i| y[i]).map(|(_, var)| var.sqrt())
}

/// `(mean_A - mean_B) / sigma`.
pub fn t_statistic(y: &[f64], groups: &GroupIndex, sigma: f64) -> f64 {
    let mean = |idx: &[usize]| idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    (mean(&groups.a) - mean(&groups.b)) / sigma
}

/// `(1 + sqrt(c ln n)) z_{1 - eta/2}`.
pub fn rejection_threshold(params: &TestParams) -> f64 {
    (1.0 + (params.c * (params.n as f64).ln()).sqrt()) * normal_upper_quantile(params.eta / 2.0)
}

/// Test one gene outside the normalization subset. `Ok(None)` means the
/// variance was degenerate and no decision was made.
pub fn test_gene(
    data: &CountMatrix,
    s: &ScalingFactors,
    gene: usize,
    params: &TestParams,
) -> Result<Option<GeneTestOutcome>> {
    if s.subset().is_some_and(|sub| sub.contains(gene)) {
        return Err(Error::GeneInSubset { gene });
    }
    let y = stabilize(data, s, gene);
    let groups = data.group_index();
    Ok(sigma_hat(&y, groups).map(|sigma| {
        let t = t_statistic(&y, groups, sigma);
        GeneTestOutcome {
            t_value: t,
            sigma_hat: sigma,
            rejected: t.abs() > rejection_threshold(params),
        }
    }))
}

/// Allocation-free tester for the randomization loop.
///
/// Takes the stabilizing weights `w_i = 2 / sqrt(s_i)` once per subset and
/// evaluates genes straight from the cached square roots.
#[derive(Clone, Debug)]
pub struct GeneTester {
    groups: GroupIndex,
    threshold: f64,
}

impl GeneTester {
    pub fn new(data: &CountMatrix, params: &TestParams) -> Self {
        GeneTester {
            groups: data.group_index().clone(),
            threshold: rejection_threshold(params),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn weights(s: &ScalingFactors) -> Vec<f64> {
        s.values().iter().map(|si| 2.0 / si.sqrt()).collect()
    }

    /// `(T, rejected)` for one gene, or `None` when the variance is degenerate.
    #[inline]
    pub fn evaluate(&self, roots: &[f64], weights: &[f64]) -> Option<(f64, bool)> {
        let (diff, var) = moments(&self.groups, |i| weights[i] * roots[i])?;
        let t = diff / var.sqrt();
        Some((t, t.abs() > self.threshold))
    }
}

/// High-probability bounds on the nuisance terms of `T` when the scaling
/// factors are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticBounds {
    /// Bound on the ratio of the true to the estimated standard error.
    pub ratio_bound: f64,
    /// Bound on the squared noise-times-scaling-error term, relative to the variance.
    pub r1_bound: f64,
    /// Bound on the squared mean-times-scaling-error term, relative to the variance.
    pub r2_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticBoundInputs {
    /// Total intensity of the normalization subset.
    pub sum_mu_s: f64,
    /// Mass-weighted mean dispersion ratio over the subset (0 for Poisson).
    pub rho_bar_s: f64,
    pub s_max: f64,
    pub mu_a: f64,
    pub mu_b: f64,
    pub n: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub c: f64,
}

/// Evaluate the three bounds with the asymptotic `(1 + o(1))` factors set to 1.
pub fn statistic_bounds(x: &StatisticBoundInputs) -> StatisticBounds {
    let n = x.n as f64;
    let ln_n = n.ln();
    let c_ln_n = x.c * ln_n;
    let relative_mass = (1.0 + x.s_max * x.rho_bar_s) / x.sum_mu_s;
    let deviation = scaling_deviation_bound(x.sum_mu_s, x.rho_bar_s, x.s_max, x.n, x.c);
    let imbalance = (n / x.n_a as f64).max(n / x.n_b as f64);
    StatisticBounds {
        ratio_bound: (1.0 + c_ln_n.sqrt()) * (1.0 + 2.0 * deviation),
        r1_bound: 2.0 * (1.0 + 2.0 * c_ln_n.sqrt() + 2.0 * c_ln_n) * (1.0 + x.c) * relative_mass * ln_n,
        r2_bound: 2.0 * (1.0 + x.c) * (x.mu_a.sqrt() + x.mu_b.sqrt()).powi(2) * relative_mass * imbalance * ln_n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count_data::Group;
    use crate::scaling::NormalizationSubset;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn two_by_two() -> GroupIndex {
        GroupIndex::from_labels(&[Group::A, Group::A, Group::B, Group::B])
    }

    fn matrix(rows: &[Vec<u64>], n_a: usize) -> CountMatrix {
        let n = rows[0].len();
        CountMatrix::new(
            (0..rows.len()).map(|j| format!("g{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            rows.concat(),
            (0..n).map(|i| if i < n_a { Group::A } else { Group::B }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stabilize_examples() {
        let data = matrix(&[vec![4, 9, 0, 8], vec![1; 4]], 2);
        let y = stabilize(&data, &ScalingFactors::unit(4), 0);
        assert_eq!(&y[..3], &[4.0, 6.0, 0.0]);
        let s = ScalingFactors::from_sizes(&[1.0, 1.0, 1.0, 2.0], None).unwrap();
        // s = (0.8, 0.8, 0.8, 1.6) after rescaling to sum 4
        assert!((stabilize(&data, &s, 0)[3] - 2.0 * (8.0f64 / 1.6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_and_t_examples() {
        let g = two_by_two();
        let y = [1.0, 3.0, 2.0, 2.0];
        let sigma = sigma_hat(&y, &g).unwrap();
        assert!((sigma - 1.0).abs() < 1e-15);
        assert_eq!(t_statistic(&y, &g, sigma), 0.0);
        assert_eq!(sigma_hat(&[5.0; 4], &g), None);
        assert_eq!(sigma_hat(&[0.0; 4], &g), None);
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        assert!((sigma_hat(&doubled, &g).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_groups_with_inexact_means_are_degenerate() {
        let g = GroupIndex::from_labels(&[Group::A, Group::A, Group::A, Group::B, Group::B, Group::B]);
        let v = 2.0 * 7.0f64.sqrt() / 0.93f64.sqrt();
        assert_eq!(sigma_hat(&[v, v, v, 0.1, 0.1, 0.1], &g), None);
    }

    #[test]
    fn threshold_reference_values() {
        let p = |c: f64| TestParams { eta: 0.05, c, n: 12, n_a: 6, n_b: 6 };
        assert!((rejection_threshold(&p(0.0)) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((rejection_threshold(&p(2.0)) - 6.329_326_997_252_457).abs() < 1e-12);
        assert!(rejection_threshold(&p(3.0)) > rejection_threshold(&p(2.0)));
        let bigger_n = TestParams { n: 20, n_a: 10, n_b: 10, ..p(2.0) };
        assert!(rejection_threshold(&bigger_n) > rejection_threshold(&p(2.0)));
    }

    #[test]
    fn test_gene_contracts() {
        let data = matrix(&[vec![5, 5, 5, 5], vec![1, 3, 2, 2], vec![1, 2, 3, 4]], 2);
        let params = TestParams::for_matrix(&data, 0.05, 2.0).unwrap();
        assert_eq!(test_gene(&data, &ScalingFactors::unit(4), 0, &params).unwrap(), None);

        let s = crate::scaling::estimate_scaling(&data, &NormalizationSubset::new(vec![2], 3).unwrap()).unwrap();
        assert!(matches!(test_gene(&data, &s, 2, &params), Err(Error::GeneInSubset { gene: 2 })));

        let mirrored = matrix(&[vec![3, 7, 7, 3], vec![1, 1, 1, 1]], 2);
        let out = test_gene(&mirrored, &ScalingFactors::unit(4), 0, &params).unwrap().unwrap();
        assert_eq!(out.t_value, 0.0);
        assert!(!out.rejected);
    }

    #[test]
    fn fast_tester_agrees_with_composed_path() {
        let data = matrix(&[vec![10, 14, 30, 41, 9, 27], vec![3, 4, 5, 6, 7, 8]], 3);
        let params = TestParams::for_matrix(&data, 0.05, 0.5).unwrap();
        let s = ScalingFactors::from_sizes(&[0.9, 1.1, 1.0, 0.8, 1.3, 0.9], None).unwrap();
        let slow = test_gene(&data, &s, 0, &params).unwrap().unwrap();
        let tester = GeneTester::new(&data, &params);
        let (t, rejected) = tester.evaluate(data.root_row(0), &GeneTester::weights(&s)).unwrap();
        assert!((t - slow.t_value).abs() < 1e-12 * t.abs().max(1.0));
        assert_eq!(rejected, slow.rejected);
    }

    #[test]
    fn planted_fourfold_gene_is_rejected() {
        // Monte Carlo power oracle: 10^3 replicates at mu = 100, n = 12
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Poisson::new(100.0).unwrap();
        let b = Poisson::new(400.0).unwrap();
        let params = TestParams { eta: 0.05, c: 2.0, n: 12, n_a: 6, n_b: 6 };
        let reps = 1000;
        let mut hits = 0;
        for _ in 0..reps {
            let row: Vec<u64> = (0..12)
                .map(|i| if i < 6 { a.sample(&mut rng) } else { b.sample(&mut rng) } as u64)
                .collect();
            let data = matrix(&[row, vec![1; 12]], 6);
            if test_gene(&data, &ScalingFactors::unit(12), 0, &params).unwrap().is_some_and(|o| o.rejected) {
                hits += 1;
            }
        }
        assert!(hits as f64 / reps as f64 >= 0.95, "hits = {hits}");
    }

    #[test]
    fn statistic_bound_reference_values() {
        let inputs = StatisticBoundInputs {
            sum_mu_s: 1000.0,
            rho_bar_s: 0.0,
            s_max: 1.0,
            mu_a: 100.0,
            mu_b: 100.0,
            n: 12,
            n_a: 6,
            n_b: 6,
            c: 2.0,
        };
        let b = statistic_bounds(&inputs);
        assert!((b.ratio_bound - 3.456_964_005_765_122).abs() < 1e-12);
        assert!((b.r1_bound - 0.229_579_166_831_237_9).abs() < 1e-12);
        assert!((b.r2_bound - 11.927_551_918_982_4).abs() < 1e-10);

        let huge = statistic_bounds(&StatisticBoundInputs { sum_mu_s: 1e15, ..inputs });
        assert!((huge.ratio_bound - (1.0 + (2.0 * 12f64.ln()).sqrt())).abs() < 1e-6);
        assert!(huge.r1_bound < 1e-10 && huge.r2_bound < 1e-8);

        let skew = StatisticBoundInputs { n_a: 4, n_b: 8, mu_a: 50.0, mu_b: 200.0, ..inputs };
        let mirrored = StatisticBoundInputs { n_a: 8, n_b: 4, mu_a: 200.0, mu_b: 50.0, ..inputs };
        assert_eq!(statistic_bounds(&skew).r2_bound, statistic_bounds(&mirrored).r2_bound);
    }

    proptest! {
        #[test]
        fn t_is_antisymmetric_and_location_invariant(
            y in proptest::collection::vec(0.0f64..50.0, 6),
            shift in -20.0f64..20.0,
            scale in 0.1f64..10.0,
        ) {
            let g = GroupIndex::from_labels(&[Group::A, Group::A, Group::A, Group::B, Group::B, Group::B]);
            if let Some(sigma) = sigma_hat(&y, &g) {
                prop_assume!(sigma > 1e-6);
                let t = t_statistic(&y, &g, sigma);
                prop_assert!((t_statistic(&y, &g.swapped(), sigma) + t).abs() < 1e-9);

                let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
                let ts = t_statistic(&shifted, &g, sigma_hat(&shifted, &g).unwrap());
                prop_assert!((ts - t).abs() < 1e-6 * t.abs().max(1.0));

                let scaled: Vec<f64> = y.iter().map(|v| v * scale).collect();
                let tl = t_statistic(&scaled, &g, sigma_hat(&scaled, &g).unwrap());
                prop_assert!((tl - t).abs() < 1e-9 * t.abs().max(1.0));
            }
        }
    }
}
