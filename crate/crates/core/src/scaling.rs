//! Scaling factors from a normalization subset, per-gene intensity
//! estimates, and the subset-drawing strategies.

use crate::count_data::CountMatrix;
use crate::error::{Error, Result};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Sorted, duplicate-free gene indices used as references for one draw.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationSubset {
    indices: Vec<usize>,
}

impl NormalizationSubset {
    pub fn new(mut indices: Vec<usize>, m: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Validation("normalization subset is empty".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= m {
                return Err(Error::Validation(format!("subset index {last} out of range (m = {m})")));
            }
        }
        Ok(NormalizationSubset { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, gene: usize) -> bool {
        self.indices.binary_search(&gene).is_ok()
    }
}

/// Per-sample scaling estimates, normalized to sum to `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    s_hat: Vec<f64>,
    /// The subset the factors were estimated on; `None` for global estimators.
    subset: Option<NormalizationSubset>,
}

impl ScalingFactors {
    /// Rescale arbitrary positive per-sample sizes so they sum to `n`.
    pub fn from_sizes(sizes: &[f64], subset: Option<NormalizationSubset>) -> Result<Self> {
        if let Some(i) = sizes.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::DegenerateSubset { sample: i });
        }
        let total: f64 = sizes.iter().sum();
        let n = sizes.len() as f64;
        Ok(ScalingFactors {
            s_hat: sizes.iter().map(|&s| n * s / total).collect(),
            subset,
        })
    }

    /// All factors equal to one.
    pub fn unit(n: usize) -> Self {
        ScalingFactors {
            s_hat: vec![1.0; n],
            subset: None,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.s_hat
    }

    pub fn subset(&self) -> Option<&NormalizationSubset> {
        self.subset.as_ref()
    }

    pub fn max(&self) -> f64 {
        self.s_hat.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-sample totals of the subset genes; zero entries are allowed here.
fn subset_totals(data: &CountMatrix, genes: &[usize]) -> Vec<u64> {
    let mut totals = vec![0u64; data.n_samples()];
    for &j in genes {
        for (t, &x) in totals.iter_mut().zip(data.row(j)) {
            *t += x;
        }
    }
    totals
}

/// `s_i = n X_i(S) / X(S)`, the ratio-of-moments (Poisson maximum likelihood)
/// estimate from the subset totals.
pub fn estimate_scaling(data: &CountMatrix, subset: &NormalizationSubset) -> Result<ScalingFactors> {
    let totals = subset_totals(data, subset.indices());
    if let Some(sample) = totals.iter().position(|&t| t == 0) {
        return Err(Error::DegenerateSubset { sample });
    }
    let sizes: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
    ScalingFactors::from_sizes(&sizes, Some(subset.clone()))
}

/// `((1/n) sum_i sqrt(X_ij / s_i))^2`, the variance-stabilized mean of the
/// rescaled counts of gene `gene`.
pub fn estimate_gene_intensity(data: &CountMatrix, s: &ScalingFactors, gene: usize) -> f64 {
    let roots = data.root_row(gene);
    let mean = roots
        .iter()
        .zip(s.values())
        .map(|(r, si)| r / si.sqrt())
        .sum::<f64>()
        / roots.len() as f64;
    mean * mean
}

/// How normalization subsets are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SubsetStrategy {
    /// Uniform `k`-subsets of all genes.
    #[default]
    FixedK,
    /// Uniform `k`-subsets of the genes whose estimated intensity is at least `mu0`.
    MinIntensity { mu0: f64 },
    /// Genes added in uniform random order until the estimated subset mass
    /// reaches `m0`.
    GrowToMass { m0: f64 },
}

impl fmt::Display for SubsetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetStrategy::FixedK => f.write_str("fixed"),
            SubsetStrategy::MinIntensity { mu0 } => write!(f, "min-intensity:{mu0}"),
            SubsetStrategy::GrowToMass { m0 } => write!(f, "grow:{m0}"),
        }
    }
}

impl FromStr for SubsetStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let positive = |v: &str| -> Result<f64> {
            match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
                _ => Err(Error::Config(format!("strategy parameter {v:?} must be a positive number"))),
            }
        };
        match s.split_once(':') {
            None if s == "fixed" => Ok(SubsetStrategy::FixedK),
            Some(("min-intensity", v)) => Ok(SubsetStrategy::MinIntensity { mu0: positive(v)? }),
            Some(("grow", v)) => Ok(SubsetStrategy::GrowToMass { m0: positive(v)? }),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected fixed, min-intensity:MU0 or grow:M0)"
            ))),
        }
    }
}

impl From<SubsetStrategy> for String {
    fn from(s: SubsetStrategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SubsetStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A strategy prepared against one matrix, ready for repeated draws.
///
/// Intensities needed before any subset exists (the eligible pool of
/// `MinIntensity`) come from a bootstrap pass with all `s_i = 1`.
#[derive(Clone, Debug)]
pub struct SubsetSampler {
    strategy: SubsetStrategy,
    m: usize,
    k: usize,
    pool: Vec<usize>,
}

impl SubsetSampler {
    pub fn new(data: &CountMatrix, strategy: SubsetStrategy, k: usize) -> Result<Self> {
        let m = data.n_genes();
        let mut pool = Vec::new();
        match strategy {
            SubsetStrategy::FixedK => {
                if k < 1 || k >= m {
                    return Err(Error::Config(format!("subset size k = {k} needs 1 <= k < m = {m}")));
                }
            }
            SubsetStrategy::MinIntensity { mu0 } => {
                if mu0.is_nan() || mu0 <= 0.0 {
                    return Err(Error::Config(format!("mu0 = {mu0} must be positive")));
                }
                let unit = ScalingFactors::unit(data.n_samples());
                pool = (0..m)
                    .filter(|&j| estimate_gene_intensity(data, &unit, j) >= mu0)
                    .collect();
                if pool.len() < k || k < 1 || k >= m {
                    return Err(Error::Infeasible(format!(
                        "{} genes reach intensity {mu0}, need k = {k} (m = {m})",
                        pool.len()
                    )));
                }
            }
            SubsetStrategy::GrowToMass { m0 } => {
                if m0.is_nan() || m0 <= 0.0 {
                    return Err(Error::Config(format!("M0 = {m0} must be positive")));
                }
                let all: Vec<usize> = (0..m).collect();
                let mass = NormalizationSubset::new(all, m)
                    .and_then(|s| Ok(subset_mass(data, s.indices(), &estimate_scaling(data, &s)?)))
                    .unwrap_or(0.0);
                if mass < m0 {
                    return Err(Error::Infeasible(format!(
                        "estimated mass of all genes is {mass:.3}, below M0 = {m0}"
                    )));
                }
            }
        }
        Ok(SubsetSampler { strategy, m, k, pool })
    }

    pub fn strategy(&self) -> SubsetStrategy {
        self.strategy
    }

    /// Nominal subset size (`k`; the growth strategy has no fixed size).
    pub fn nominal_k(&self) -> usize {
        self.k
    }

    /// Genes eligible for `MinIntensity` draws.
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn draw<R: Rng + ?Sized>(&self, data: &CountMatrix, rng: &mut R) -> Result<NormalizationSubset> {
        match self.strategy {
            SubsetStrategy::FixedK => NormalizationSubset::new(index::sample(rng, self.m, self.k).into_vec(), self.m),
            SubsetStrategy::MinIntensity { .. } => {
                let picked = index::sample(rng, self.pool.len(), self.k)
                    .into_iter()
                    .map(|p| self.pool[p])
                    .collect();
                NormalizationSubset::new(picked, self.m)
            }
            SubsetStrategy::GrowToMass { m0 } => self.grow(data, m0, rng),
        }
    }

    fn grow<R: Rng + ?Sized>(&self, data: &CountMatrix, m0: f64, rng: &mut R) -> Result<NormalizationSubset> {
        let mut order: Vec<usize> = (0..self.m).collect();
        order.shuffle(rng);
        // at least one gene must stay outside the subset to be tested
        for size in 1..self.m {
            let genes = &order[..size];
            let totals = subset_totals(data, genes);
            if totals.contains(&0) {
                continue;
            }
            let sizes: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
            let s = ScalingFactors::from_sizes(&sizes, None)?;
            if subset_mass(data, genes, &s) >= m0 {
                return NormalizationSubset::new(genes.to_vec(), self.m);
            }
        }
        Err(Error::Infeasible(format!(
            "subset mass never reached M0 = {m0} with at most m - 1 genes"
        )))
    }
}

/// Sum of estimated intensities over `genes`.
fn subset_mass(data: &CountMatrix, genes: &[usize], s: &ScalingFactors) -> f64 {
    genes.iter().map(|&j| estimate_gene_intensity(data, s, j)).sum()
}

/// Draw one subset with `strategy`.
pub fn grow_subset<R: Rng + ?Sized>(
    data: &CountMatrix,
    strategy: SubsetStrategy,
    k: usize,
    rng: &mut R,
) -> Result<NormalizationSubset> {
    SubsetSampler::new(data, strategy, k)?.draw(data, rng)
}

/// High-probability bound on `max_i |sqrt(s_i / s_hat_i) - 1|`:
/// `sqrt(2 (1 + c) (1 + s_max rho_bar) / sum_mu * ln(n) / n)`.
///
/// The `(1 + o(1))` factor of the asymptotic statement is taken as 1, so the
/// value is asymptotic, not a finite-sample guarantee.
pub fn scaling_deviation_bound(sum_mu_s: f64, rho_bar_s: f64, s_max: f64, n: usize, c: f64) -> f64 {
    let n = n as f64;
    (2.0 * (1.0 + c) * (1.0 + s_max * rho_bar_s) / sum_mu_s * n.ln() / n).sqrt()
}

/// Mass-weighted mean dispersion ratio `sum mu_j rho_j / sum mu_j` over a subset.
pub fn mean_dispersion_ratio(mu: &[f64], rho: &[f64]) -> f64 {
    let mass: f64 = mu.iter().sum();
    mu.iter().zip(rho).map(|(m, r)| m * r).sum::<f64>() / mass
}
