//! The randomized detection procedure.
//!
//! `run_randomizations` draws `r` normalization subsets, tests every gene
//! outside each one and tallies `(r_j, R_j)`. `step_down` turns the tally
//! into pooled p-values and the capped Holm-type scan. `detect` iterates at
//! `alpha / 2^i` on the genes left over whenever the cap `Delta` is reached.

use crate::baselines::{baseline_detect, BaselineResult};
use crate::config::RunConfig;
use crate::count_data::{filter_low_counts, CountMatrix, FilterSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gene_test::{GeneTester, TestParams};
use crate::randomization_math::{delta_cap, min_randomizations, pooled_p_value, rate_bounds, DesignParams};
use crate::rng::{stream, Domain};
use crate::scaling::{estimate_scaling, SubsetSampler, SubsetStrategy};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::io::Write;

/// Randomizations per work item. Fixed so partial sums are merged in the
/// same order whatever the thread count.
const CHUNK: usize = 32;
/// Work items held in memory at once.
const WAVE: usize = 64;

/// Per-gene test and rejection counts over all randomizations.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTally {
    /// `r_j`: randomizations in which gene `j` was outside the subset and
    /// got a decision.
    pub tests: Vec<u32>,
    /// `R_j`: rejections among those tests.
    pub rejections: Vec<u32>,
    pub t_sum: Vec<f64>,
    pub t_sq_sum: Vec<f64>,
    pub randomizations: u64,
    /// Subset draws thrown away because a sample had a zero subset total.
    pub resampled_subsets: u64,
    /// Gene/subset pairs skipped for a degenerate variance.
    pub no_decision_pairs: u64,
    pub subset_size_sum: u64,
}

impl DetectionTally {
    pub fn new(m: usize) -> Self {
        DetectionTally {
            tests: vec![0; m],
            rejections: vec![0; m],
            t_sum: vec![0.0; m],
            t_sq_sum: vec![0.0; m],
            randomizations: 0,
            resampled_subsets: 0,
            no_decision_pairs: 0,
            subset_size_sum: 0,
        }
    }

    /// Tally built from known counts, with no statistic sums.
    pub fn from_counts(tests: Vec<u32>, rejections: Vec<u32>, randomizations: u64) -> Self {
        let m = tests.len();
        DetectionTally {
            tests,
            rejections,
            randomizations,
            ..DetectionTally::new(m)
        }
    }

    pub fn n_genes(&self) -> usize {
        self.tests.len()
    }

    fn merge(&mut self, other: &DetectionTally) {
        for j in 0..self.tests.len() {
            self.tests[j] += other.tests[j];
            self.rejections[j] += other.rejections[j];
            self.t_sum[j] += other.t_sum[j];
            self.t_sq_sum[j] += other.t_sq_sum[j];
        }
        self.randomizations += other.randomizations;
        self.resampled_subsets += other.resampled_subsets;
        self.no_decision_pairs += other.no_decision_pairs;
        self.subset_size_sum += other.subset_size_sum;
    }

    pub fn mean_subset_size(&self) -> f64 {
        self.subset_size_sum as f64 / self.randomizations.max(1) as f64
    }

    /// Mean and standard deviation of `T` over the tests of gene `j`.
    pub fn t_moments(&self, j: usize) -> Option<(f64, f64)> {
        let n = self.tests[j] as f64;
        if n == 0.0 {
            return None;
        }
        let mean = self.t_sum[j] / n;
        let var = if n > 1.0 {
            ((self.t_sq_sum[j] - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }
}

struct Randomizer<'a> {
    data: &'a CountMatrix,
    sampler: SubsetSampler,
    tester: GeneTester,
    seed: u64,
    iteration: u64,
    max_resamples: u64,
}

impl Randomizer<'_> {
    fn run_one(&self, t: u64, part: &mut DetectionTally) -> Result<()> {
        let mut rng = stream(self.seed, Domain::Subsets, self.iteration, t);
        let mut attempts = 0u64;
        let (subset, s) = loop {
            let subset = self.sampler.draw(self.data, &mut rng)?;
            match estimate_scaling(self.data, &subset) {
                Ok(s) => break (subset, s),
                Err(Error::DegenerateSubset { .. }) => {
                    attempts += 1;
                    part.resampled_subsets += 1;
                    if attempts > self.max_resamples {
                        return Err(Error::TooManyDegenerateDraws { attempts });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let weights = GeneTester::weights(&s);
        let mut inside = subset.indices().iter().copied().peekable();
        for j in 0..self.data.n_genes() {
            if inside.peek() == Some(&j) {
                inside.next();
                continue;
            }
            match self.tester.evaluate(self.data.root_row(j), &weights) {
                Some((t_value, rejected)) => {
                    part.tests[j] += 1;
                    part.rejections[j] += u32::from(rejected);
                    part.t_sum[j] += t_value;
                    part.t_sq_sum[j] += t_value * t_value;
                }
                None => part.no_decision_pairs += 1,
            }
        }
        part.randomizations += 1;
        part.subset_size_sum += subset.len() as u64;
        Ok(())
    }
}

/// Draw `params.r` subsets with `strategy` and tally the per-gene decisions.
///
/// Subset `t` of iteration `iteration` always comes from the same random
/// stream, including its resamples, so the tally does not depend on the
/// execution mode or thread count.
pub fn run_randomizations(
    data: &CountMatrix,
    params: &DesignParams,
    strategy: SubsetStrategy,
    seed: u64,
    iteration: u64,
    exec: Execution,
) -> Result<DetectionTally> {
    params.validate()?;
    let test = TestParams::for_matrix(data, params.eta, params.c)?;
    let runner = Randomizer {
        data,
        sampler: SubsetSampler::new(data, strategy, params.k)?,
        tester: GeneTester::new(data, &test),
        seed,
        iteration,
        max_resamples: 100 * params.r,
    };
    let m = data.n_genes();
    let r = params.r as usize;
    let n_chunks = r.div_ceil(CHUNK);
    let mut total = DetectionTally::new(m);
    for wave_start in (0..n_chunks).step_by(WAVE) {
        let parts = exec.try_map(WAVE.min(n_chunks - wave_start), |w| {
            let chunk = wave_start + w;
            let mut part = DetectionTally::new(m);
            for t in chunk * CHUNK..((chunk + 1) * CHUNK).min(r) {
                runner.run_one(t as u64, &mut part)?;
            }
            Ok::<_, Error>(part)
        })?;
        for part in &parts {
            total.merge(part);
        }
    }
    Ok(total)
}

/// One comparison of the scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolmCheck {
    pub gene: usize,
    /// 1-based position in the ordering.
    pub rank: usize,
    /// `p_(rank)^(rank - 1)`.
    pub p_value: f64,
    /// `alpha / (m - rank + 1)`.
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDown {
    pub d_hat: usize,
    pub delta: usize,
    /// Genes by decreasing `R_j`, ties by increasing index.
    pub order: Vec<usize>,
    /// Every comparison made, the failing one included.
    pub checks: Vec<HolmCheck>,
}

impl StepDown {
    pub fn detected(&self) -> &[usize] {
        &self.order[..self.d_hat]
    }

    pub fn cap_reached(&self) -> bool {
        self.delta > 0 && self.d_hat == self.delta
    }
}

/// Capped step-down at level `params.alpha`: declare the gene of rank `d`
/// while `p_(d)^(d-1) < alpha / (m - d + 1)`, for `d` up to `Delta`.
pub fn step_down(tally: &DetectionTally, params: &DesignParams) -> Result<StepDown> {
    let m = params.m;
    if tally.n_genes() != m {
        return Err(Error::Validation(format!(
            "tally covers {} genes, design has m = {m}",
            tally.n_genes()
        )));
    }
    let delta = delta_cap(params)?.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| tally.rejections[b].cmp(&tally.rejections[a]).then(a.cmp(&b)));
    let mut checks = Vec::new();
    for d in 1..=delta {
        let gene = order[d - 1];
        let p_value = pooled_p_value(u64::from(tally.rejections[gene]), params, d - 1);
        let threshold = params.alpha / (m - d + 1) as f64;
        let passed = p_value < threshold;
        checks.push(HolmCheck {
            gene,
            rank: d,
            p_value,
            threshold,
            passed,
        });
        if !passed {
            break;
        }
    }
    let d_hat = checks.iter().filter(|c| c.passed).count();
    Ok(StepDown {
        d_hat,
        delta,
        order,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub gene_id: String,
    #[serde(rename = "R")]
    pub rejections: u32,
    pub r_j: u32,
    pub p_value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub delta: usize,
    pub m: usize,
    /// Subset size used in the p-values (the mean drawn size for growing subsets).
    pub k: usize,
    pub d_hat: usize,
    pub detected: Vec<Detection>,
    pub resampled_subsets: u64,
    pub no_decision_pairs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The last scan stopped below the cap.
    BelowCap,
    /// Too few genes left to draw a subset and test something.
    TooFewGenes,
    /// The subset strategy could not be applied to the remaining genes.
    StrategyInfeasible,
    /// `max_iterations` reached while the cap was still binding.
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub m: usize,
    pub kappa: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub delta: usize,
    pub min_randomizations: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub resampled_subsets: u64,
    pub no_decision_pairs: u64,
    pub r_below_minimum: bool,
}

/// Final per-gene numbers, taken from the iteration in which the gene was
/// last tested.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneSummary {
    pub gene_id: String,
    pub iteration: usize,
    pub rejections: u32,
    pub r_j: u32,
    /// `p_(d)^(d-1)` for detected genes, `p^(d_hat)` of the iteration otherwise.
    pub p_value: f64,
    pub detected: bool,
    pub t_mean: Option<f64>,
    pub t_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: RunConfig,
    pub seed: u64,
    pub genes_in_input: usize,
    pub filtered_out: Vec<String>,
    pub design: DesignSummary,
    pub iterations: Vec<IterationRecord>,
    pub detected_union: Vec<String>,
    pub d_hat: usize,
    pub truncated: bool,
    pub stop_reason: StopReason,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub genes: Vec<GeneSummary>,
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `gene_id, R_j, r_j, p_value, detected`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "gene_id\tR_j\tr_j\tp_value\tdetected")?;
        for g in &self.genes {
            writeln!(
                w,
                "{}\t{}\t{}\t{:e}\t{}",
                g.gene_id,
                g.rejections,
                g.r_j,
                g.p_value,
                u8::from(g.detected)
            )?;
        }
        Ok(())
    }

    /// Per-gene summary of `T` over the randomizations.
    pub fn write_stats_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "gene_id\titeration\tr_j\tR_j\tt_mean\tt_sd")?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"));
        for g in &self.genes {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                g.gene_id,
                g.iteration,
                g.r_j,
                g.rejections,
                fmt(g.t_mean),
                fmt(g.t_sd)
            )?;
        }
        Ok(())
    }
}

/// Baseline results in the detector's TSV layout: `R_j` is the single
/// level-`eta` decision, `r_j` is 1 when the gene got a decision, and
/// `detected` is the Holm outcome.
pub fn write_baseline_tsv<W: Write>(result: &BaselineResult, eta: f64, mut w: W) -> std::io::Result<()> {
    writeln!(w, "gene_id\tR_j\tr_j\tp_value\tdetected")?;
    for g in &result.genes {
        writeln!(
            w,
            "{}\t{}\t{}\t{:e}\t{}",
            g.gene_id,
            u8::from(g.t_value.is_some() && g.p_value < eta),
            u8::from(g.t_value.is_some()),
            g.p_value,
            u8::from(g.detected)
        )?;
    }
    Ok(())
}

/// Run the iterative procedure on an already filtered matrix.
pub fn detect(data: &CountMatrix, config: &RunConfig, exec: Execution) -> Result<DetectionReport> {
    let m0 = data.n_genes();
    let config = config.resolve(m0)?;
    if m0 <= config.k + 1 {
        return Err(Error::Config(format!(
            "{m0} genes leave nothing to test with subsets of size k = {}",
            config.k
        )));
    }
    let base = config.design(m0)?;
    let delta0 = delta_cap(&base)?;
    let bounds0 = rate_bounds(&base, 0);
    let min_r = min_randomizations(&base, 0).ok().map(|b| b.required);
    info!(
        "m = {m0}, k = {}, r = {}: kappa = {:.4}, theta0 = {:.4}, theta1 = {:.4}, Delta = {delta0}",
        base.k,
        base.r,
        base.kappa(),
        bounds0.theta0,
        bounds0.theta1
    );
    let r_below_minimum = min_r.is_some_and(|need| base.r < need);
    if let Some(need) = min_r.filter(|_| r_below_minimum) {
        warn!("r = {} is below the {need} randomizations needed for the error guarantee", base.r);
    }

    let mut genes: Vec<GeneSummary> = data
        .gene_ids()
        .iter()
        .map(|id| GeneSummary {
            gene_id: id.clone(),
            iteration: 0,
            rejections: 0,
            r_j: 0,
            p_value: 1.0,
            detected: false,
            t_mean: None,
            t_sd: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..m0).collect();
    let mut iterations = Vec::new();
    let mut diagnostics = Diagnostics {
        r_below_minimum,
        ..Diagnostics::default()
    };
    let mut stop_reason = StopReason::MaxIterations;

    for i in 1..=config.max_iterations {
        let m = active.len();
        if m <= config.k + 1 {
            stop_reason = StopReason::TooFewGenes;
            break;
        }
        let current: Cow<CountMatrix> = if m == m0 {
            Cow::Borrowed(data)
        } else {
            Cow::Owned(data.select_genes(&active)?)
        };
        let mut params = DesignParams {
            alpha: config.alpha / 2f64.powi(i as i32),
            ..config.design(m)?
        };
        let tally = match run_randomizations(&current, &params, config.strategy, config.seed, i as u64, exec) {
            Err(Error::Infeasible(msg)) if i > 1 => {
                warn!("iteration {i}: {msg}; stopping");
                stop_reason = StopReason::StrategyInfeasible;
                break;
            }
            other => other?,
        };
        if matches!(config.strategy, SubsetStrategy::GrowToMass { .. }) {
            params.k = (tally.mean_subset_size().round() as usize).clamp(1, m - 1);
        }
        let sd = step_down(&tally, &params)?;
        debug!("iteration {i}: m = {m}, Delta = {}, d_hat = {}", sd.delta, sd.d_hat);

        for (local, &global) in active.iter().enumerate() {
            let g = &mut genes[global];
            g.iteration = i;
            g.rejections = tally.rejections[local];
            g.r_j = tally.tests[local];
            g.p_value = pooled_p_value(u64::from(g.rejections), &params, sd.d_hat);
            let moments = tally.t_moments(local);
            g.t_mean = moments.map(|m| m.0);
            g.t_sd = moments.map(|m| m.1);
        }
        let mut detected = Vec::with_capacity(sd.d_hat);
        for check in sd.checks.iter().filter(|c| c.passed) {
            let g = &mut genes[active[check.gene]];
            g.detected = true;
            g.p_value = check.p_value;
            detected.push(Detection {
                gene_id: g.gene_id.clone(),
                rejections: g.rejections,
                r_j: g.r_j,
                p_value: check.p_value,
                threshold: check.threshold,
            });
        }
        diagnostics.resampled_subsets += tally.resampled_subsets;
        diagnostics.no_decision_pairs += tally.no_decision_pairs;
        iterations.push(IterationRecord {
            iteration: i,
            alpha: params.alpha,
            delta: sd.delta,
            m,
            k: params.k,
            d_hat: sd.d_hat,
            detected,
            resampled_subsets: tally.resampled_subsets,
            no_decision_pairs: tally.no_decision_pairs,
        });

        if !sd.cap_reached() {
            stop_reason = StopReason::BelowCap;
            break;
        }
        let mut removed: Vec<usize> = sd.detected().to_vec();
        removed.sort_unstable();
        active = active
            .iter()
            .enumerate()
            .filter(|(local, _)| removed.binary_search(local).is_err())
            .map(|(_, &g)| g)
            .collect();
    }

    let truncated = stop_reason == StopReason::MaxIterations;
    if truncated {
        warn!("stopped after {} iterations with the cap still binding", config.max_iterations);
    }
    let detected_union: Vec<String> = iterations
        .iter()
        .flat_map(|it| it.detected.iter().map(|d| d.gene_id.clone()))
        .collect();
    Ok(DetectionReport {
        seed: config.seed,
        genes_in_input: m0,
        filtered_out: Vec::new(),
        design: DesignSummary {
            m: m0,
            kappa: base.kappa(),
            theta0: bounds0.theta0,
            theta1: bounds0.theta1,
            delta: delta0,
            min_randomizations: min_r,
        },
        d_hat: detected_union.len(),
        detected_union,
        iterations,
        truncated,
        stop_reason,
        diagnostics,
        genes,
        config,
    })
}

/// Everything produced by one analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub report: DetectionReport,
    pub baseline: Option<BaselineResult>,
}

/// Filter low-count genes, run the detector and, if configured, the baseline.
pub fn analyze(data: &CountMatrix, config: &RunConfig, exec: Execution) -> Result<Analysis> {
    let (filtered, removed) = filter_low_counts(
        data,
        FilterSpec {
            min_total_reads: config.filter_min_total,
        },
    )?;
    if !removed.is_empty() {
        info!("filtered out {} genes with fewer than {} reads", removed.len(), config.filter_min_total);
    }
    let mut report = detect(&filtered, config, exec)?;
    report.genes_in_input = data.n_genes();
    report.filtered_out = removed;
    let baseline = match config.baseline {
        Some(method) => {
            let params = TestParams::for_matrix(&filtered, config.eta, 0.0)?;
            Some(baseline_detect(&filtered, method, &params, config.alpha)?)
        }
        None => None,
    };
    Ok(Analysis { report, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count_data::Group;
    use crate::randomization_math::binom_sf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn poisson_matrix(mu: &[f64], fold: &[f64], seed: u64) -> CountMatrix {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = Vec::new();
        for (j, &m) in mu.iter().enumerate() {
            for i in 0..n {
                let lambda = if i < 6 { m } else { m * fold[j] };
                counts.push(Poisson::new(lambda).unwrap().sample(&mut rng) as u64);
            }
        }
        CountMatrix::new(
            (0..mu.len()).map(|j| format!("g{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            counts,
            (0..n).map(|i| if i < 6 { Group::A } else { Group::B }).collect(),
        )
        .unwrap()
    }

    fn params(m: usize, k: usize, r: u64) -> DesignParams {
        DesignParams {
            m,
            k,
            r,
            ..DesignParams::reference()
        }
    }

    #[test]
    fn single_complement_draw_tests_one_gene() {
        let data = poisson_matrix(&[100.0; 8], &[1.0; 8], 1);
        let tally = run_randomizations(&data, &params(8, 7, 1), SubsetStrategy::FixedK, 5, 1, Execution::Sequential)
            .unwrap();
        assert_eq!(tally.tests.iter().filter(|&&t| t == 1).count(), 1);
        assert_eq!(tally.tests.iter().sum::<u32>(), 1);
    }

    #[test]
    fn tally_is_identical_across_execution_modes() {
        let data = poisson_matrix(&[50.0; 60], &[1.0; 60], 2);
        let p = params(60, 5, 300);
        let seq = run_randomizations(&data, &p, SubsetStrategy::FixedK, 9, 1, Execution::Sequential).unwrap();
        let par = run_randomizations(&data, &p, SubsetStrategy::FixedK, 9, 1, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.randomizations, 300);
        assert!(seq.tests.iter().zip(&seq.rejections).all(|(t, r)| r <= t && *t <= 300));
        assert!(seq.tests.iter().map(|&t| u64::from(t)).sum::<u64>() <= 300 * 55);
    }

    #[test]
    fn degenerate_draws_are_resampled() {
        // genes 0..5 are zero in sample 0; subsets made only of them are degenerate
        let mut data_rows = Vec::new();
        for j in 0..10u64 {
            let mut row = vec![20 + j; 4];
            if j < 5 {
                row[0] = 0;
            }
            data_rows.extend(row);
        }
        let data = CountMatrix::new(
            (0..10).map(|j| format!("g{j}")).collect(),
            (0..4).map(|i| format!("s{i}")).collect(),
            data_rows,
            vec![Group::A, Group::A, Group::B, Group::B],
        )
        .unwrap();
        let tally =
            run_randomizations(&data, &params(10, 1, 200), SubsetStrategy::FixedK, 3, 1, Execution::Sequential).unwrap();
        assert!(tally.resampled_subsets > 50);
        assert_eq!(tally.randomizations, 200);
    }

    #[test]
    fn hopeless_data_aborts() {
        // sample 0 is zero on every gene, so every subset is degenerate
        let rows = [[0, 0, 0, 0], [0, 3, 3, 3], [0, 5, 5, 5]].concat();
        let data = CountMatrix::new(
            (0..3).map(|j| format!("g{j}")).collect(),
            (0..4).map(|i| format!("s{i}")).collect(),
            rows,
            vec![Group::A, Group::A, Group::B, Group::B],
        )
        .unwrap();
        assert!(matches!(
            run_randomizations(&data, &params(3, 2, 5), SubsetStrategy::FixedK, 1, 1, Execution::Sequential),
            Err(Error::TooManyDegenerateDraws { attempts: 501 })
        ));
    }

    #[test]
    fn step_down_examples() {
        let p = DesignParams::reference();
        let none = DetectionTally::from_counts(vec![2450; 500], vec![0; 500], 2500);
        assert_eq!(step_down(&none, &p).unwrap().d_hat, 0);

        let mut rejections = vec![0; 500];
        rejections[17] = 2500;
        let one = step_down(&DetectionTally::from_counts(vec![2450; 500], rejections, 2500), &p).unwrap();
        assert_eq!(one.d_hat, 1);
        assert_eq!(one.detected(), &[17]);
        assert_eq!(one.checks.len(), 2);
    }

    /// Straight-line re-derivation of the pooled p-value and the scan.
    fn oracle_d_hat(rejections: &[u32], m: usize, k: usize, r: u64, eta: f64, alpha: f64, cap: usize) -> usize {
        let mut sorted = rejections.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let kappa = 1.0 - k as f64 / m as f64;
        let ratio = |a: usize| -> f64 {
            // C(a, k) / C(m - 1, k) as a running product
            (0..k).map(|i| (a as f64 - i as f64) / ((m - 1 - i) as f64)).product()
        };
        let mut d_hat = 0;
        for d in 1..=cap {
            let pi0 = if d - 1 + k < m { 1.0 - ratio(m - (d - 1) - 1) } else { 1.0 };
            let theta = kappa * (eta * (1.0 - pi0) + pi0);
            let p = binom_sf(i64::from(sorted[d - 1]), r, theta);
            if p < alpha / (m - d + 1) as f64 {
                d_hat = d;
            } else {
                break;
            }
        }
        d_hat
    }

    #[test]
    fn step_down_matches_straight_line_oracle() {
        let p = DesignParams::reference();
        let mut rejections = vec![0u32; 500];
        rejections[0] = 2400;
        rejections[1] = 2300;
        rejections[2] = 50;
        for (j, r) in rejections.iter_mut().enumerate().skip(3) {
            *r = (j as u32 * 37) % 140;
        }
        let tally = DetectionTally::from_counts(vec![2450; 500], rejections.clone(), 2500);
        let sd = step_down(&tally, &p).unwrap();
        assert_eq!(sd.d_hat, oracle_d_hat(&rejections, 500, 10, 2500, 0.05, 0.05, 29));
        assert_eq!(sd.d_hat, 2);
        for c in sd.checks.iter().filter(|c| c.passed) {
            assert!(c.p_value < c.threshold);
        }
    }

    #[test]
    fn ties_are_broken_by_gene_index() {
        let p = params(50, 5, 100);
        let tally = DetectionTally::from_counts(vec![90; 50], [vec![7; 10], vec![3; 40]].concat(), 100);
        let sd = step_down(&tally, &p).unwrap();
        assert_eq!(&sd.order[..12], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn planted_gene_detected_in_one_iteration() {
        let mut fold = vec![1.0; 200];
        fold[3] = 4.0;
        let data = poisson_matrix(&[100.0; 200], &fold, 4);
        let cfg = RunConfig {
            r: Some(600),
            ..RunConfig::with_seed(8)
        };
        let report = detect(&data, &cfg, Execution::Parallel).unwrap();
        assert_eq!(report.detected_union, vec!["g3".to_owned()]);
        assert_eq!(report.iterations.len(), 1);
        assert_eq!(report.stop_reason, StopReason::BelowCap);
        assert_eq!(report.d_hat, 1);
        let again = detect(&data, &cfg, Execution::Sequential).unwrap();
        assert_eq!(report.to_json(), again.to_json());
    }

    #[test]
    fn strong_signal_triggers_more_iterations() {
        // 15 of 150 genes at 8x against Delta = 9: the cap binds and the
        // remaining genes are re-tested at alpha / 4
        let fold: Vec<f64> = (0..150).map(|j| if j < 15 { 8.0 } else { 1.0 }).collect();
        let data = poisson_matrix(&[200.0; 150], &fold, 6);
        let cfg = RunConfig {
            r: Some(500),
            ..RunConfig::with_seed(2)
        };
        let report = detect(&data, &cfg, Execution::Parallel).unwrap();
        let first = &report.iterations[0];
        assert_eq!(first.d_hat, first.delta);
        assert!(report.iterations.len() >= 2);
        assert_eq!(report.iterations[1].alpha, 0.0125);
        assert_eq!(report.iterations[1].m, 150 - first.delta);
        assert_eq!(report.d_hat, report.detected_union.len());
    }

    #[test]
    fn tiny_matrix_is_a_config_error() {
        let data = poisson_matrix(&[100.0; 11], &[1.0; 11], 1);
        assert!(matches!(
            detect(&data, &RunConfig::with_seed(1), Execution::Sequential),
            Err(Error::Config(_))
        ));
    }
}
