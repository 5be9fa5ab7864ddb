//! Global scaling-factor estimators used as comparators: total count,
//! upper quartile and a simplified trimmed mean of M-values.

use crate::count_data::CountMatrix;
use crate::error::{Error, Result};
use crate::gene_test::{test_gene, TestParams};
use crate::scaling::ScalingFactors;
use crate::special::two_sided_p;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BaselineMethod {
    TotalCount,
    UpperQuartile { q: f64 },
    TrimmedMeanM { trim_m: f64, trim_a: f64 },
}

impl BaselineMethod {
    pub fn upper_quartile() -> Self {
        BaselineMethod::UpperQuartile { q: 0.75 }
    }

    pub fn tmm() -> Self {
        BaselineMethod::TrimmedMeanM { trim_m: 0.3, trim_a: 0.05 }
    }

    /// Short name used in output file names.
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::TotalCount => "totalcount",
            BaselineMethod::UpperQuartile { .. } => "uq",
            BaselineMethod::TrimmedMeanM { .. } => "tmm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineMethod::TotalCount => Ok(()),
            BaselineMethod::UpperQuartile { q } if q > 0.0 && q < 1.0 => Ok(()),
            BaselineMethod::TrimmedMeanM { trim_m, trim_a }
                if (0.0..0.5).contains(&trim_m) && (0.0..0.5).contains(&trim_a) =>
            {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid baseline parameters: {other}"))),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMethod::TotalCount => f.write_str("totalcount"),
            BaselineMethod::UpperQuartile { q } => write!(f, "uq:{q}"),
            BaselineMethod::TrimmedMeanM { trim_m, trim_a } => write!(f, "tmm:{trim_m}:{trim_a}"),
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    /// `totalcount`, `uq[:Q]` or `tmm[:TRIM_M:TRIM_A]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let nums: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {p:?} in baseline {s:?}")))
            })
            .collect::<Result<_>>()?;
        let method = match (head, nums.as_slice()) {
            ("totalcount", []) => BaselineMethod::TotalCount,
            ("uq", []) => BaselineMethod::upper_quartile(),
            ("uq", &[q]) => BaselineMethod::UpperQuartile { q },
            ("tmm", []) => BaselineMethod::tmm(),
            ("tmm", &[trim_m, trim_a]) => BaselineMethod::TrimmedMeanM { trim_m, trim_a },
            _ => {
                return Err(Error::Config(format!(
                    "unknown baseline {s:?} (expected totalcount, uq[:Q] or tmm[:TRIM_M:TRIM_A])"
                )))
            }
        };
        method.validate()?;
        Ok(method)
    }
}

impl From<BaselineMethod> for String {
    fn from(m: BaselineMethod) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for BaselineMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_column(data: &CountMatrix, i: usize) -> Vec<f64> {
    (0..data.n_genes()).map(|j| data.get(j, i) as f64).collect()
}

/// Average ranks (1-based), ties share the mean of their positions.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &o in &order[start..end] {
            ranks[o] = rank;
        }
        start = end;
    }
    ranks
}

/// TMM factor of `obs` against `reference`.
fn tmm_factor(obs: &[f64], reference: &[f64], trim_m: f64, trim_a: f64) -> Result<f64> {
    let n_obs: f64 = obs.iter().sum();
    let n_ref: f64 = reference.iter().sum();
    let mut m_values = Vec::new();
    let mut a_values = Vec::new();
    let mut variances = Vec::new();
    for (&o, &r) in obs.iter().zip(reference) {
        if o > 0.0 && r > 0.0 {
            let (po, pr) = (o / n_obs, r / n_ref);
            m_values.push((po / pr).log2());
            a_values.push(0.5 * (po.log2() + pr.log2()));
            variances.push((n_obs - o) / n_obs / o + (n_ref - r) / n_ref / r);
        }
    }
    let len = m_values.len() as f64;
    let lo_m = (len * trim_m).floor() + 1.0;
    let hi_m = len + 1.0 - lo_m;
    let lo_a = (len * trim_a).floor() + 1.0;
    let hi_a = len + 1.0 - lo_a;
    let rank_m = average_ranks(&m_values);
    let rank_a = average_ranks(&a_values);
    let (mut num, mut den) = (0.0, 0.0);
    for g in 0..m_values.len() {
        if (lo_m..=hi_m).contains(&rank_m[g]) && (lo_a..=hi_a).contains(&rank_a[g]) && variances[g] > 0.0 {
            num += m_values[g] / variances[g];
            den += 1.0 / variances[g];
        }
    }
    if den == 0.0 {
        return Err(Error::Validation("no genes left after TMM trimming".into()));
    }
    Ok((num / den).exp2())
}

/// Global scaling factors from one of the comparator methods.
pub fn baseline_scaling(data: &CountMatrix, method: BaselineMethod) -> Result<ScalingFactors> {
    method.validate()?;
    let totals = data.sample_totals();
    if let Some(sample) = totals.iter().position(|&t| t == 0) {
        return Err(Error::Validation(format!(
            "sample {} has no counts",
            data.sample_ids()[sample]
        )));
    }
    let n = data.n_samples();
    let sizes: Vec<f64> = match method {
        BaselineMethod::TotalCount => totals.iter().map(|&t| t as f64).collect(),
        BaselineMethod::UpperQuartile { q } => (0..n)
            .map(|i| {
                let mut nonzero: Vec<f64> = sample_column(data, i).into_iter().filter(|&x| x > 0.0).collect();
                nonzero.sort_by(f64::total_cmp);
                quantile_sorted(&nonzero, q)
            })
            .collect(),
        BaselineMethod::TrimmedMeanM { trim_m, trim_a } => {
            let columns: Vec<Vec<f64>> = (0..n).map(|i| sample_column(data, i)).collect();
            // reference: the sample whose upper quartile of proportions is closest to the mean
            let uq: Vec<f64> = columns
                .iter()
                .zip(&totals)
                .map(|(col, &t)| {
                    let mut p: Vec<f64> = col.iter().map(|x| x / t as f64).collect();
                    p.sort_by(f64::total_cmp);
                    quantile_sorted(&p, 0.75)
                })
                .collect();
            let mean_uq = uq.iter().sum::<f64>() / n as f64;
            let reference = (0..n)
                .min_by(|&a, &b| (uq[a] - mean_uq).abs().total_cmp(&(uq[b] - mean_uq).abs()))
                .unwrap_or(0);
            columns
                .iter()
                .zip(&totals)
                .map(|(col, &t)| Ok(t as f64 * tmm_factor(col, &columns[reference], trim_m, trim_a)?))
                .collect::<Result<_>>()?
        }
    };
    ScalingFactors::from_sizes(&sizes, None).map_err(|_| {
        Error::Validation(format!("{method} produced a non-positive scaling factor"))
    })
}

/// One gene's result under a global baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineGene {
    pub gene_id: String,
    pub t_value: Option<f64>,
    /// Two-sided normal p-value; 1 when the variance was degenerate.
    pub p_value: f64,
    pub detected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub scaling: Vec<f64>,
    pub genes: Vec<BaselineGene>,
}

impl BaselineResult {
    pub fn detected_ids(&self) -> Vec<&str> {
        self.genes.iter().filter(|g| g.detected).map(|g| g.gene_id.as_str()).collect()
    }
}

/// Holm step-down on `p`; returns which hypotheses are rejected. Ties keep
/// index order.
pub fn holm(p: &[f64], alpha: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut rejected = vec![false; p.len()];
    let m = p.len();
    for (rank, &g) in order.iter().enumerate() {
        if p[g] < alpha / (m - rank) as f64 {
            rejected[g] = true;
        } else {
            break;
        }
    }
    rejected
}

/// Test every gene with one global set of scaling factors and apply Holm
/// at `alpha`. The inflation constant is forced to 0: the baselines take
/// their scaling at face value.
pub fn baseline_detect(
    data: &CountMatrix,
    method: BaselineMethod,
    params: &TestParams,
    alpha: f64,
) -> Result<BaselineResult> {
    let params = TestParams { c: 0.0, ..*params };
    params.validate()?;
    let s = baseline_scaling(data, method)?;
    let outcomes = (0..data.n_genes())
        .map(|j| test_gene(data, &s, j, &params))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = outcomes
        .iter()
        .map(|o| o.map_or(1.0, |o| two_sided_p(o.t_value)))
        .collect();
    let rejected = holm(&p, alpha);
    let genes = outcomes
        .iter()
        .zip(&p)
        .zip(rejected)
        .zip(data.gene_ids())
        .map(|(((o, &p_value), detected), id)| BaselineGene {
            gene_id: id.clone(),
            t_value: o.map(|o| o.t_value),
            p_value,
            detected,
        })
        .collect();
    Ok(BaselineResult {
        method,
        scaling: s.values().to_vec(),
        genes,
    })
}
