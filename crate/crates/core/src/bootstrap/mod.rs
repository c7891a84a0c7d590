//! Bootstrap resampling, refitting and bootstrap confidence intervals.
//!
//! Four schemes are available:
//!
//! * [`Scheme::Case`] resamples whole subjects;
//! * [`Scheme::Par`] simulates new random effects and residuals from the
//!   fitted model;
//! * [`Scheme::Np`] resamples variance-corrected empirical Bayes estimates
//!   and residuals;
//! * [`Scheme::Cnp`] resamples random effects and residuals from draws of each
//!   subject's conditional distribution.
//!
//! Every replicate owns the random stream `(seed, replicate)`, so results do
//! not depend on how replicates are scheduled across threads.

mod resample;

pub use resample::{
    correct_random_effects_evd, correct_residuals, resample_case, resample_conditional_np, resample_nonparametric, resample_parametric,
    standardized_residuals, CnpPools, CorrectionVariant, EtaDraw, NpPools, ResidualPool, Strata,
};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec};
use crate::rng::{self, tag};
use crate::saem::{
    compute_ebe, fit_saem, sample_conditional, ConditionalDraws, ConditionalSettings, EbeMode, PopulationEstimate, SaemSettings,
};
use crate::stats::{self, Interval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Case,
    Par,
    Np,
    Cnp,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Case, Scheme::Par, Scheme::Np, Scheme::Cnp];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Case => "case",
            Scheme::Par => "par",
            Scheme::Np => "np",
            Scheme::Cnp => "cnp",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "case" => Ok(Scheme::Case),
            "par" => Ok(Scheme::Par),
            "np" => Ok(Scheme::Np),
            "cnp" => Ok(Scheme::Cnp),
            _ => Err(Error::InvalidConfig(format!("unknown bootstrap scheme `{s}` (expected case, par, np or cnp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub scheme: Scheme,
    /// Number of bootstrap replicates.
    pub b: usize,
    /// Case scheme only.
    pub stratify_by: Option<Strata>,
    pub cnp_residual_pool: ResidualPool,
    pub cnp_eta_draw: EtaDraw,
    /// Conditional draws per subject, used when the run has to sample them
    /// itself.
    pub m: usize,
    pub correction: CorrectionVariant,
    /// Point estimate of the random effects used by the NP scheme.
    pub ebe_mode: EbeMode,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            scheme: Scheme::Case,
            b: 200,
            stratify_by: None,
            cnp_residual_pool: ResidualPool::PerSubject,
            cnp_eta_draw: EtaDraw::SubjectThenSample,
            m: 100,
            correction: CorrectionVariant::CovarianceMatching,
            ebe_mode: EbeMode::Mode,
            seed: 1,
        }
    }
}

impl BootstrapConfig {
    pub fn new(scheme: Scheme, b: usize, seed: u64) -> Self {
        BootstrapConfig { scheme, b, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidConfig("B must be at least 1".into()));
        }
        if matches!(self.scheme, Scheme::Cnp | Scheme::Np) && self.m == 0 {
            return Err(Error::InvalidConfig("M must be at least 1".into()));
        }
        if self.stratify_by.is_some() && self.scheme != Scheme::Case {
            return Err(Error::InvalidConfig("stratification applies to the case scheme only".into()));
        }
        Ok(())
    }
}

/// Outcome of one resample-and-refit cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    /// Reported parameter values of the refit; `None` if it failed.
    pub values: Option<Vec<f64>>,
    pub error: Option<String>,
}

impl Replicate {
    pub fn ok(&self) -> bool {
        self.values.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub scheme: Scheme,
    pub param_names: Vec<String>,
    /// Reported values of the original fit.
    pub original: Vec<f64>,
    pub replicates: Vec<Replicate>,
    pub n_success: usize,
    pub n_failed: usize,
    /// More than half of the refits failed.
    pub unreliable: bool,
}

impl BootstrapRun {
    /// Successful values of parameter `p`, in replicate order.
    pub fn column(&self, p: usize) -> Vec<f64> {
        self.replicates.iter().filter_map(|r| r.values.as_ref().map(|v| v[p])).collect()
    }
}

/// Pools that are built once from the original fit and shared by all
/// replicates.
enum Prepared {
    Case,
    Par,
    Np(NpPools),
    Cnp(CnpPools),
}

/// Sample conditional draws when the caller did not supply them. The seed is
/// derived from the bootstrap seed so the run stays reproducible.
fn conditional_or_sample<'a>(
    spec: &ModelSpec,
    dataset: &Dataset,
    estimate: &PopulationEstimate,
    conditional: Option<&'a ConditionalDraws>,
    config: &BootstrapConfig,
    owned: &'a mut Option<ConditionalDraws>,
) -> Result<&'a ConditionalDraws> {
    match conditional {
        Some(c) => Ok(c),
        None => {
            let seed = rng::derive_seed(config.seed, &[tag::CONDITIONAL]);
            let draws = sample_conditional(spec, dataset, &estimate.theta_hat, config.m, &ConditionalSettings::default(), seed)?;
            Ok(owned.insert(draws))
        }
    }
}

/// Resample the data `config.b` times with the configured scheme, refit each
/// resample starting from the original estimate, and collect the estimates.
/// Refits reuse the SAEM seed of `fit_settings`, so differences between
/// replicates come from the resampled data alone.
///
/// The NP scheme samples conditional draws itself when `conditional` is
/// `None`. The cNP scheme requires them and fails with
/// [`Error::MissingPrerequisite`] otherwise. Failed refits are recorded and
/// do not abort the run. Replicates run on the current rayon pool.
pub fn run_bootstrap(
    spec: &ModelSpec,
    dataset: &Dataset,
    estimate: &PopulationEstimate,
    conditional: Option<&ConditionalDraws>,
    config: &BootstrapConfig,
    fit_settings: &SaemSettings,
) -> Result<BootstrapRun> {
    config.validate()?;
    fit_settings.validate()?;
    dataset.validate()?;
    let theta_hat = &estimate.theta_hat;
    let mut owned = None;
    let prepared = match config.scheme {
        Scheme::Case => Prepared::Case,
        Scheme::Par => Prepared::Par,
        Scheme::Np => {
            let draws = conditional_or_sample(spec, dataset, estimate, conditional, config, &mut owned)?;
            let ebe = compute_ebe(draws, config.ebe_mode);
            let residuals = standardized_residuals(spec, theta_hat, dataset, &ebe);
            Prepared::Np(NpPools::new(&ebe, &residuals, &theta_hat.omega, config.correction)?)
        }
        Scheme::Cnp => {
            let draws = conditional
                .ok_or_else(|| Error::MissingPrerequisite("the cnp scheme needs conditional draws; sample them after fitting".into()))?;
            if draws.subjects.len() != dataset.n_subjects()
                || draws.subjects.iter().zip(&dataset.design.subjects).any(|(d, s)| d.id != s.id)
            {
                return Err(Error::InvalidInput("conditional draws do not belong to this dataset".into()));
            }
            Prepared::Cnp(CnpPools::new(draws, config.cnp_residual_pool)?)
        }
    };
    let refit_settings = SaemSettings { keep_trace: false, ..fit_settings.clone() };

    let replicates: Vec<Replicate> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(config.seed, &[tag::BOOTSTRAP, b as u64]);
            let resampled = match &prepared {
                Prepared::Case => resample_case(dataset, config.stratify_by, &mut r),
                Prepared::Par => resample_parametric(spec, theta_hat, &dataset.design, &mut r),
                Prepared::Np(p) => resample_nonparametric(spec, theta_hat, p, &dataset.design, &mut r),
                Prepared::Cnp(p) => resample_conditional_np(spec, theta_hat, p, &dataset.design, config.cnp_eta_draw, &mut r),
            };
            match resampled.and_then(|ds| fit_saem(spec, &ds, theta_hat, &refit_settings)) {
                Ok(est) => Replicate { index: b, values: Some(est.values), error: None },
                Err(e) => Replicate { index: b, values: None, error: Some(e.to_string()) },
            }
        })
        .collect();

    let n_success = replicates.iter().filter(|r| r.ok()).count();
    let n_failed = replicates.len() - n_success;
    let unreliable = 2 * n_failed > config.b;
    if unreliable {
        log::warn!("{} of {} {} refits failed; the bootstrap distribution is unreliable", n_failed, config.b, config.scheme);
    }
    Ok(BootstrapRun {
        scheme: config.scheme,
        param_names: estimate.param_names.clone(),
        original: estimate.values.clone(),
        replicates,
        n_success,
        n_failed,
        unreliable,
    })
}

/// Summary of one parameter's bootstrap distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: Option<f64>,
    /// Bootstrap standard error: the sample SD (divisor n − 1).
    pub se: Option<f64>,
    pub ci90: Option<Interval>,
    pub ci95: Option<Interval>,
    /// `θ̂ ± z·SE_B` around the original estimate.
    pub normal90: Option<Interval>,
    pub normal95: Option<Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub scheme: Scheme,
    pub n_success: usize,
    pub n_failed: usize,
    pub unreliable: bool,
    pub failures: Vec<String>,
    pub params: Vec<ParamSummary>,
}

/// Per-parameter mean, bootstrap SE and intervals over successful replicates.
pub fn summarize_run(run: &BootstrapRun) -> BootstrapSummary {
    let params = run
        .param_names
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let col = run.column(p);
            let mean = (!col.is_empty()).then(|| stats::mean(&col));
            let se = (col.len() >= 2).then(|| stats::sample_sd(&col));
            let normal = |alpha| se.and_then(|s| stats::normal_ci(run.original[p], s, alpha));
            ParamSummary {
                name: name.clone(),
                mean,
                se,
                ci90: stats::percentile_ci(&col, 0.1),
                ci95: stats::percentile_ci(&col, 0.05),
                normal90: normal(0.1),
                normal95: normal(0.05),
            }
        })
        .collect();
    BootstrapSummary {
        scheme: run.scheme,
        n_success: run.n_success,
        n_failed: run.n_failed,
        unreliable: run.unreliable,
        failures: run.replicates.iter().filter_map(|r| r.error.as_ref().map(|e| format!("replicate {}: {e}", r.index))).collect(),
        params,
    }
}
