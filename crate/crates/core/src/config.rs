use crate::baselines::BaselineMethod;
use crate::error::{Error, Result};
use crate::randomization_math::{min_randomizations, DesignParams};
use crate::scaling::SubsetStrategy;
use serde::{Deserialize, Serialize};

/// Floor on the default number of randomizations.
pub const DEFAULT_RANDOMIZATIONS: u64 = 2500;

/// Every tuning knob of a detector run.
///
/// `r = None` means "use the default", resolved per data set by
/// [`RunConfig::resolve`]; reports always carry the resolved value so a
/// run can be repeated from its own echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub r: Option<u64>,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub xi: f64,
    pub seed: u64,
    pub filter_min_total: u64,
    pub strategy: SubsetStrategy,
    pub max_iterations: usize,
    pub baseline: Option<BaselineMethod>,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            k: 10,
            r: None,
            eta: 0.05,
            alpha: 0.05,
            beta: 0.10,
            c: 2.0,
            xi: 0.25,
            seed,
            filter_min_total: 20,
            strategy: SubsetStrategy::FixedK,
            max_iterations: 16,
            baseline: None,
        }
    }

    /// Design parameters for `m` genes at the configured `alpha`. Requires a
    /// resolved `r`.
    pub fn design(&self, m: usize) -> Result<DesignParams> {
        let r = self
            .r
            .ok_or_else(|| Error::Config("number of randomizations not resolved".into()))?;
        let params = DesignParams {
            m,
            k: self.k,
            r,
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            c: self.c,
            xi: self.xi,
        };
        params.validate()?;
        Ok(params)
    }

    /// Fill in `r = max(2500, min_randomizations(d = 0))` when unset.
    pub fn resolve(&self, m: usize) -> Result<RunConfig> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if let Some(b) = self.baseline {
            b.validate()?;
        }
        let mut resolved = self.clone();
        if resolved.r.is_none() {
            let provisional = RunConfig { r: Some(1), ..self.clone() }.design(m)?;
            let needed = min_randomizations(&provisional, 0)
                .map_err(|e| match e {
                    Error::Underpowered { .. } => e,
                    other => Error::Config(format!("cannot choose a default r: {other}")),
                })?
                .required;
            resolved.r = Some(needed.max(DEFAULT_RANDOMIZATIONS));
        }
        resolved.design(m)?;
        Ok(resolved)
    }
}
