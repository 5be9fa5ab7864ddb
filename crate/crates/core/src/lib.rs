//! Normalization-free two-group differential expression.
//!
//! Each randomization draws a small random set of reference genes, scales
//! the samples by their totals over that set, and tests every other gene.
//! Per-gene detection counts are turned into binomial p-values and fed to a
//! capped step-down procedure that controls the family-wise error rate.
//!
//! ```no_run
//! use randref::{analyze, load_counts, load_groups, Execution, RunConfig};
//! use std::path::Path;
//!
//! let groups = load_groups(Path::new("groups.tsv"))?;
//! let data = load_counts(Path::new("counts.tsv"), &groups)?;
//! let analysis = analyze(&data, &RunConfig::with_seed(42), Execution::Parallel)?;
//! println!("{:?}", analysis.report.detected_union);
//! # Ok::<(), randref::Error>(())
//! ```

pub mod baselines;
pub mod config;
pub mod count_data;
pub mod detector;
pub mod error;
pub mod exec;
pub mod gene_test;
pub mod randomization_math;
pub mod rng;
pub mod scaling;
pub mod simulator;
pub mod special;

pub use baselines::{baseline_detect, baseline_scaling, BaselineMethod, BaselineResult};
pub use config::RunConfig;
pub use count_data::{filter_low_counts, load_counts, load_groups, CountMatrix, FilterSpec, Group, GroupMap};
pub use detector::{analyze, detect, run_randomizations, step_down, Analysis, DetectionReport, DetectionTally};
pub use error::{Error, Result};
pub use exec::Execution;
pub use randomization_math::DesignParams;
pub use scaling::{ScalingFactors, SubsetStrategy};
pub use simulator::{run_null_experiment, run_power_experiment, ExperimentConfig, ExperimentResult, SimulationScenario};
