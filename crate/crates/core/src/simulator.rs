//! Synthetic two-group count data and the null / power experiments.

use crate::config::RunConfig;
use crate::count_data::{CountMatrix, Group};
use crate::detector::detect;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{derive_seed, stream, Domain};
use crate::special::normal_quantile;
use log::info;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Ground truth for generated data: `X_ij ~ Poisson(s_i mu_j)` in group A and
/// `Poisson(s_i fold_j mu_j)` in group B, or the gamma-Poisson (negative
/// binomial) mixture when the gene has a finite dispersion `gamma_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationScenario {
    pub n_a: usize,
    pub n_b: usize,
    pub mu_a: Vec<f64>,
    pub fold: Vec<f64>,
    /// True scaling factors, summing to `n`.
    pub s: Vec<f64>,
    /// `None` for Poisson genes.
    pub gamma: Vec<Option<f64>>,
    /// The first `m1` genes are the DE ones.
    pub m1: usize,
    pub seed: u64,
}

impl SimulationScenario {
    /// `m` genes at intensity `mu0`, unit scaling factors, no DE gene.
    pub fn null(n_a: usize, n_b: usize, m: usize, mu0: f64, seed: u64) -> Self {
        SimulationScenario {
            n_a,
            n_b,
            mu_a: vec![mu0; m],
            fold: vec![1.0; m],
            s: vec![1.0; n_a + n_b],
            gamma: vec![None; m],
            m1: 0,
            seed,
        }
    }

    /// Genes `j = 1..=m1` get `fold_j = 1 + a / sqrt(j)`.
    pub fn decaying_folds(mut self, a: f64, m1: usize) -> Self {
        let m1 = m1.min(self.m());
        for j in 0..m1 {
            self.fold[j] = 1.0 + a / ((j + 1) as f64).sqrt();
        }
        self.m1 = m1;
        self
    }

    pub fn with_dispersion(mut self, gamma: Option<f64>) -> Self {
        self.gamma = vec![gamma; self.m()];
        self
    }

    pub fn m(&self) -> usize {
        self.mu_a.len()
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.fold.len() != m || self.gamma.len() != m || self.s.len() != self.n() {
            return Err(Error::Config("scenario vectors have inconsistent lengths".into()));
        }
        if self.n_a < 2 || self.n_b < 2 || m < 2 {
            return Err(Error::Config("scenario needs m >= 2 and at least 2 samples per group".into()));
        }
        if self.mu_a.iter().any(|&v| !(v >= 0.0 && v.is_finite()))
            || self.fold.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || self.s.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || self.gamma.iter().flatten().any(|&g| g.is_nan() || g <= 0.0)
        {
            return Err(Error::Config("scenario intensities, folds, factors and dispersions must be positive".into()));
        }
        let total: f64 = self.s.iter().sum();
        if (total - self.n() as f64).abs() > 1e-9 * self.n() as f64 {
            return Err(Error::Config(format!("true scaling factors sum to {total}, not n = {}", self.n())));
        }
        if self.m1 > m {
            return Err(Error::Config(format!("m1 = {} exceeds m = {m}", self.m1)));
        }
        Ok(())
    }

    /// Expected count of gene `j` in sample `i`.
    pub fn intensity(&self, j: usize, i: usize) -> f64 {
        let mu = if i < self.n_a { self.mu_a[j] } else { self.mu_a[j] * self.fold[j] };
        self.s[i] * mu
    }

    /// Replicate `replicate`; gene `j` always uses its own random stream.
    pub fn generate(&self, replicate: u64) -> Result<CountMatrix> {
        self.validate()?;
        let n = self.n();
        let mut counts = Vec::with_capacity(self.m() * n);
        for j in 0..self.m() {
            let mut rng = stream(self.seed, Domain::Counts, replicate, j as u64);
            for i in 0..n {
                counts.push(draw_count(self.intensity(j, i), self.gamma[j], &mut rng));
            }
        }
        CountMatrix::new(
            (1..=self.m()).map(|j| format!("gene{j:05}")).collect(),
            (1..=self.n_a)
                .map(|i| format!("A{i}"))
                .chain((1..=self.n_b).map(|i| format!("B{i}")))
                .collect(),
            counts,
            (0..n).map(|i| if i < self.n_a { Group::A } else { Group::B }).collect(),
        )
    }
}

/// Poisson draw, or gamma-Poisson with shape `gamma` and mean `lambda`.
pub fn draw_count<R: Rng + ?Sized>(lambda: f64, gamma: Option<f64>, rng: &mut R) -> u64 {
    let rate = match gamma {
        Some(g) if lambda > 0.0 => Gamma::new(g, lambda / g).expect("positive gamma parameters").sample(rng),
        _ => lambda,
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive Poisson rate").sample(rng) as u64
}

/// Fold changes below `phi_low` or above `phi_up` are detectable at family
/// level `alpha` by the oracle test:
/// `(1 -/+ |z_{alpha/2m}| (1 + sqrt(c ln n)) / sqrt(n mu0))^2`.
pub fn phi_thresholds(n: usize, mu0: f64, m: usize, alpha: f64, c: f64) -> (f64, f64) {
    let q = normal_quantile(alpha / (2.0 * m as f64)).abs();
    let n = n as f64;
    let shift = q * (1.0 + (c * n.ln()).sqrt()) / (n * mu0).sqrt();
    ((1.0 - shift).powi(2), (1.0 + shift).powi(2))
}

/// Settings shared by both experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_a: usize,
    pub n_b: usize,
    pub m: usize,
    pub mu0: f64,
    /// Number of DE genes in the power experiment.
    pub m1: usize,
    /// Negative binomial dispersion, `None` for Poisson.
    pub gamma: Option<f64>,
    pub replicates: usize,
    /// Detector settings; its seed is the experiment's master seed.
    pub detector: RunConfig,
}

impl ExperimentConfig {
    /// `n = 12`, `m = 500`, `mu0 = 100`, `m1 = 225`, Poisson, 100 replicates,
    /// detector defaults with `r = 2500`.
    pub fn reference(seed: u64) -> Self {
        ExperimentConfig {
            n_a: 6,
            n_b: 6,
            m: 500,
            mu0: 100.0,
            m1: 225,
            gamma: None,
            replicates: 100,
            detector: RunConfig {
                r: Some(2500),
                ..RunConfig::with_seed(seed)
            },
        }
    }

    fn scenario(&self, fold_a: Option<f64>) -> SimulationScenario {
        let base = SimulationScenario::null(self.n_a, self.n_b, self.m, self.mu0, self.detector.seed)
            .with_dispersion(self.gamma);
        match fold_a {
            Some(a) => base.decaying_folds(a, self.m1),
            None => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub config: ExperimentConfig,
    /// `a` of the power experiment.
    pub a: Option<f64>,
    pub replicates: usize,
    /// Fraction of replicates with at least one non-DE gene detected.
    pub fwer: f64,
    pub avg_false: f64,
    pub avg_true: f64,
    pub truncated_replicates: usize,
    pub phi_low: f64,
    pub phi_up: f64,
    /// Number of leading DE genes with `fold_j >= phi_up`.
    pub phi_up_crossover: usize,
    /// Mean detection rate over those genes.
    pub rate_above_phi_up: Option<f64>,
    #[serde(skip)]
    pub per_gene_rate: Vec<f64>,
    #[serde(skip)]
    pub fold: Vec<f64>,
    #[serde(skip)]
    pub gene_ids: Vec<String>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    /// Mean detection rate over genes `0..count`.
    pub fn mean_rate(&self, count: usize) -> f64 {
        let count = count.min(self.per_gene_rate.len());
        self.per_gene_rate[..count].iter().sum::<f64>() / count.max(1) as f64
    }

    /// `gene_id, j, fold, detection_rate, above_phi_up`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "gene_id\tj\tfold\tdetection_rate\tabove_phi_up")?;
        for (j, ((id, rate), fold)) in self.gene_ids.iter().zip(&self.per_gene_rate).zip(&self.fold).enumerate() {
            writeln!(
                w,
                "{id}\t{}\t{fold:.6}\t{rate:.4}\t{}",
                j + 1,
                u8::from(j < self.phi_up_crossover)
            )?;
        }
        Ok(())
    }
}

fn run_experiment(config: &ExperimentConfig, a: Option<f64>, exec: Execution) -> Result<ExperimentResult> {
    if config.replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    if config.detector.r == Some(0) {
        return Err(Error::Config("number of randomizations r must be at least 1".into()));
    }
    let scenario = config.scenario(a);
    scenario.validate()?;
    let detector = config.detector.resolve(config.m)?;
    let m1 = scenario.m1;
    let started = Instant::now();
    let outcomes = exec.try_map(config.replicates, |rep| {
        let data = scenario.generate(rep as u64)?;
        let cfg = RunConfig {
            seed: derive_seed(detector.seed, Domain::Replicates, rep as u64),
            ..detector.clone()
        };
        let report = detect(&data, &cfg, exec)?;
        let detected: Vec<bool> = report.genes.iter().map(|g| g.detected).collect();
        Ok::<_, Error>((detected, report.truncated))
    })?;
    info!(
        "{} replicates of m = {} in {:.2?}",
        config.replicates,
        config.m,
        started.elapsed()
    );

    let reps = config.replicates as f64;
    let mut hits = vec![0u32; config.m];
    let (mut erring, mut false_total, mut true_total, mut truncated) = (0usize, 0usize, 0usize, 0usize);
    for (detected, was_truncated) in &outcomes {
        let false_hits = detected[m1..].iter().filter(|&&d| d).count();
        erring += usize::from(false_hits > 0);
        false_total += false_hits;
        true_total += detected[..m1].iter().filter(|&&d| d).count();
        truncated += usize::from(*was_truncated);
        for (h, &d) in hits.iter_mut().zip(detected) {
            *h += u32::from(d);
        }
    }
    let (phi_low, phi_up) = phi_thresholds(scenario.n(), config.mu0, config.m, detector.alpha, detector.c);
    let crossover = scenario.fold[..m1].iter().take_while(|&&f| f >= phi_up).count();
    let per_gene_rate: Vec<f64> = hits.iter().map(|&h| h as f64 / reps).collect();
    let rate_above_phi_up =
        (crossover > 0).then(|| per_gene_rate[..crossover].iter().sum::<f64>() / crossover as f64);
    Ok(ExperimentResult {
        kind: if a.is_some() { "power" } else { "null" }.to_owned(),
        config: ExperimentConfig {
            detector,
            ..config.clone()
        },
        a,
        replicates: config.replicates,
        fwer: erring as f64 / reps,
        avg_false: false_total as f64 / reps,
        avg_true: true_total as f64 / reps,
        truncated_replicates: truncated,
        phi_low,
        phi_up,
        phi_up_crossover: crossover,
        rate_above_phi_up,
        gene_ids: (1..=config.m).map(|j| format!("gene{j:05}")).collect(),
        fold: scenario.fold,
        per_gene_rate,
    })
}

/// Global null: every gene invariant, any detection is a false one.
pub fn run_null_experiment(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentResult> {
    run_experiment(config, None, exec)
}

/// Genes `j <= m1` carry `fold_j = 1 + a / sqrt(j)`.
pub fn run_power_experiment(config: &ExperimentConfig, a: f64, exec: Execution) -> Result<ExperimentResult> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::Config(format!("a = {a} must be positive")));
    }
    run_experiment(config, Some(a), exec)
}
