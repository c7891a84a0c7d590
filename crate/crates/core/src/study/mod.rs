//! Monte Carlo evaluation of interval coverage and bias.
//!
//! A study simulates `K` datasets from a scenario, fits each one, builds
//! intervals with every configured method and then aggregates how often the
//! intervals contain the true values.

mod scenario;

pub use scenario::{preset_names, scenario_preset, scenario_to_file, GroupFile, Method, ModelKind, ScenarioFile, ScenarioSpec, ThetaFile};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{run_bootstrap, summarize_run, BootstrapConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::simulate_dataset;
use crate::rng::{self, tag};
use crate::saem::{fit_saem, sample_conditional, ConditionalSettings, SaemSettings};
use crate::stats::{self, Interval};

/// Intervals of one method for one replicate at one confidence level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub alpha: f64,
    pub intervals: Vec<Option<Interval>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// The original estimate for the asymptotic method, the bootstrap mean
    /// otherwise.
    pub estimate: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
    pub intervals: Vec<IntervalSet>,
    /// Bootstrap refits that failed.
    pub failed_refits: usize,
    /// Set when the method could not produce anything for this replicate.
    pub error: Option<String>,
}

impl MethodResult {
    pub fn at(&self, alpha: f64) -> Option<&IntervalSet> {
        self.intervals.iter().find(|s| s.alpha == alpha)
    }
}

/// Everything a study keeps about one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub k: usize,
    pub seed: u64,
    /// Original fit; `None` if it failed.
    pub estimate: Option<Vec<f64>>,
    pub error: Option<String>,
    pub methods: Vec<MethodResult>,
    /// Model fits performed, including bootstrap refits.
    pub fits: usize,
}

/// Seed of replicate `k` of a study.
pub fn replicate_seed(master_seed: u64, k: usize) -> u64 {
    rng::derive_seed(master_seed, &[tag::REPLICATE, k as u64])
}

/// Simulate dataset `k`, fit it starting from the truth and evaluate every
/// configured method. `seed` is the replicate seed (see [`replicate_seed`]).
pub fn run_replicate(scenario: &ScenarioSpec, k: usize, seed: u64) -> Result<ReplicateRecord> {
    run_replicate_with(scenario, k, seed, &SaemSettings::default())
}

/// [`run_replicate`] with explicit SAEM settings (their seed is replaced).
pub fn run_replicate_with(scenario: &ScenarioSpec, k: usize, seed: u64, saem: &SaemSettings) -> Result<ReplicateRecord> {
    scenario.validate()?;
    let spec = scenario.spec();
    let truth = &scenario.theta_true;
    let dataset = simulate_dataset(&spec, truth, &scenario.design, rng::derive_seed(seed, &[tag::SIMULATE]))?;
    let fit_settings = saem.with_seed(rng::derive_seed(seed, &[tag::SAEM_SUBJECT]));
    let estimate = match fit_saem(&spec, &dataset, truth, &fit_settings) {
        Ok(e) => e,
        Err(e) => {
            return Ok(ReplicateRecord { k, seed, estimate: None, error: Some(e.to_string()), methods: Vec::new(), fits: 1 });
        }
    };
    let p = estimate.values.len();
    let mut fits = 1;

    let needs_draws = scenario.methods.iter().any(|m| matches!(m, Method::Np | Method::Cnp));
    let draws = if needs_draws {
        Some(sample_conditional(
            &spec,
            &dataset,
            &estimate.theta_hat,
            scenario.m,
            &ConditionalSettings::default(),
            rng::derive_seed(seed, &[tag::CONDITIONAL]),
        ))
    } else {
        None
    };

    let mut methods = Vec::with_capacity(scenario.methods.len());
    for &method in &scenario.methods {
        let Some(scheme) = method.scheme() else {
            let intervals = scenario
                .alphas
                .iter()
                .map(|&alpha| IntervalSet { alpha, intervals: crate::saem::asymptotic_ci(&estimate, alpha) })
                .collect();
            methods.push(MethodResult {
                method,
                estimate: estimate.values.iter().map(|&v| Some(v)).collect(),
                se: estimate.se.clone(),
                intervals,
                failed_refits: 0,
                error: None,
            });
            continue;
        };
        let mut config = BootstrapConfig::new(scheme, scenario.b, rng::derive_seed(seed, &[tag::BOOTSTRAP, method as u64]));
        config.m = scenario.m;
        if scheme == crate::bootstrap::Scheme::Case {
            config.stratify_by = scenario.case_strata;
        }
        let conditional = match &draws {
            Some(Ok(d)) => Some(d),
            Some(Err(e)) => {
                methods.push(unavailable(method, p, &scenario.alphas, format!("conditional sampling failed: {e}")));
                continue;
            }
            None => None,
        };
        match run_bootstrap(&spec, &dataset, &estimate, conditional, &config, &fit_settings) {
            Ok(run) => {
                fits += run.replicates.len();
                let summary = summarize_run(&run);
                let intervals = scenario
                    .alphas
                    .iter()
                    .map(|&alpha| IntervalSet { alpha, intervals: (0..p).map(|i| stats::percentile_ci(&run.column(i), alpha)).collect() })
                    .collect();
                methods.push(MethodResult {
                    method,
                    estimate: summary.params.iter().map(|s| s.mean).collect(),
                    se: summary.params.iter().map(|s| s.se).collect(),
                    intervals,
                    failed_refits: run.n_failed,
                    error: None,
                });
            }
            Err(e) => methods.push(unavailable(method, p, &scenario.alphas, e.to_string())),
        }
    }
    Ok(ReplicateRecord { k, seed, estimate: Some(estimate.values), error: None, methods, fits })
}

fn unavailable(method: Method, p: usize, alphas: &[f64], error: String) -> MethodResult {
    MethodResult {
        method,
        estimate: vec![None; p],
        se: vec![None; p],
        intervals: alphas.iter().map(|&alpha| IntervalSet { alpha, intervals: vec![None; p] }).collect(),
        failed_refits: 0,
        error: Some(error),
    }
}

/// Fraction of available intervals containing `truth`; `None` when no
/// interval is available.
pub fn coverage_rate(intervals: &[Option<Interval>], truth: f64) -> Option<f64> {
    let available: Vec<&Interval> = intervals.iter().flatten().collect();
    if available.is_empty() {
        return None;
    }
    Some(available.iter().filter(|i| i.contains(truth)).count() as f64 / available.len() as f64)
}

/// Monte Carlo standard error of a coverage proportion: `sqrt(p(1 − p)/K)`.
pub fn mc_se(expected_coverage: f64, k: usize) -> f64 {
    (expected_coverage * (1.0 - expected_coverage) / k as f64).sqrt()
}

/// Mean relative deviation of `estimates` from `truth`, in percent.
pub fn relative_bias_params(estimates: &[f64], truth: f64) -> Option<f64> {
    if truth == 0.0 || estimates.is_empty() {
        return None;
    }
    Some(100.0 * estimates.iter().map(|e| (e - truth) / truth).sum::<f64>() / estimates.len() as f64)
}

/// Root mean squared deviation from the true value with divisor `K − 1`.
pub fn empirical_se(estimates: &[f64], truth: f64) -> Option<f64> {
    if estimates.len() < 2 {
        return None;
    }
    Some((estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / (estimates.len() - 1) as f64).sqrt())
}

/// Mean relative deviation of estimated SEs from the empirical SE, in
/// percent.
pub fn relative_bias_se(ses: &[f64], se_empirical: f64) -> Option<f64> {
    if !(se_empirical > 0.0) || ses.is_empty() {
        return None;
    }
    Some(100.0 * ses.iter().map(|s| (s - se_empirical) / se_empirical).sum::<f64>() / ses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scenario: String,
    pub method: Method,
    pub parameter: String,
    pub alpha: f64,
    pub coverage: Option<f64>,
    /// `sqrt(ĉ(1 − ĉ)/K_available)` at the observed coverage `ĉ`.
    pub mc_se: Option<f64>,
    pub contained: usize,
    pub k_available: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub scenario: String,
    pub method: Method,
    pub parameter: String,
    pub rb_param_pct: Option<f64>,
    pub rb_se_pct: Option<f64>,
    pub se_empirical: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub k: usize,
    pub failed_fits: usize,
    /// Methods that produced nothing for some replicates, with counts.
    pub method_failures: BTreeMap<Method, usize>,
    /// More than 20% of the original fits failed.
    pub flagged: bool,
    pub coverage: Vec<CoverageRow>,
    pub bias: Vec<BiasRow>,
}

/// Aggregate replicate records (in any order) into coverage and bias tables.
pub fn aggregate(scenario: &ScenarioSpec, records: &[ReplicateRecord]) -> CoverageReport {
    let mut records: Vec<&ReplicateRecord> = records.iter().collect();
    records.sort_by_key(|r| r.k);
    let spec = scenario.spec();
    let names = spec.param_names();
    let truth = scenario.theta_true.to_vector(&spec);
    let ok: Vec<&ReplicateRecord> = records.iter().copied().filter(|r| r.estimate.is_some()).collect();
    let failed_fits = records.len() - ok.len();

    let mut method_failures = BTreeMap::new();
    let mut coverage = Vec::new();
    let mut bias = Vec::new();
    for &method in &scenario.methods {
        let results: Vec<&MethodResult> = ok.iter().filter_map(|r| r.methods.iter().find(|m| m.method == method)).collect();
        let n_err = results.iter().filter(|m| m.error.is_some()).count();
        if n_err > 0 {
            method_failures.insert(method, n_err);
        }
        for (p, name) in names.iter().enumerate() {
            for &alpha in &scenario.alphas {
                let intervals: Vec<Option<Interval>> = results.iter().map(|m| m.at(alpha).and_then(|s| s.intervals[p])).collect();
                let k_available = intervals.iter().flatten().count();
                let contained = intervals.iter().flatten().filter(|i| i.contains(truth[p])).count();
                let cov = coverage_rate(&intervals, truth[p]);
                coverage.push(CoverageRow {
                    scenario: scenario.name.clone(),
                    method,
                    parameter: name.clone(),
                    alpha,
                    coverage: cov,
                    mc_se: cov.map(|c| mc_se(c, k_available)),
                    contained,
                    k_available,
                });
            }
            let originals: Vec<f64> = ok.iter().filter_map(|r| r.estimate.as_ref().map(|e| e[p])).collect();
            let se_emp = empirical_se(&originals, truth[p]);
            let means: Vec<f64> = results.iter().filter_map(|m| m.estimate[p]).collect();
            let ses: Vec<f64> = results.iter().filter_map(|m| m.se[p]).collect();
            bias.push(BiasRow {
                scenario: scenario.name.clone(),
                method,
                parameter: name.clone(),
                rb_param_pct: relative_bias_params(&means, truth[p]),
                rb_se_pct: se_emp.and_then(|s| relative_bias_se(&ses, s)),
                se_empirical: se_emp,
            });
        }
    }
    let flagged = 5 * failed_fits > records.len();
    if flagged {
        log::warn!("{failed_fits} of {} fits failed in scenario {}", records.len(), scenario.name);
    }
    CoverageReport { scenario: scenario.name.clone(), k: records.len(), failed_fits, method_failures, flagged, coverage, bias }
}

/// Where a study keeps its per-replicate records.
#[derive(Clone, Debug)]
pub struct StudyStore {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct StudyManifest {
    scenario: ScenarioSpec,
    master_seed: u64,
    saem: SaemSettings,
}

impl StudyStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StudyStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_path(&self, k: usize) -> PathBuf {
        self.dir.join("replicates").join(format!("{k:05}.json"))
    }

    /// Create the store or check that an existing one belongs to the same
    /// study, so that a resumed run never mixes in foreign records.
    fn open(&self, manifest: &StudyManifest) -> Result<()> {
        fs::create_dir_all(self.dir.join("replicates"))?;
        let path = self.dir.join("study.json");
        if path.exists() {
            let existing: StudyManifest = serde_json::from_slice(&fs::read(&path)?)?;
            if existing != *manifest {
                return Err(Error::InvalidConfig(format!(
                    "{} holds records of a different study; use another output directory",
                    self.dir.display()
                )));
            }
        } else {
            write_atomic(&path, serde_json::to_string_pretty(manifest)?.as_bytes())?;
        }
        Ok(())
    }

    fn load(&self, k: usize) -> Result<Option<ReplicateRecord>> {
        let path = self.record_path(k);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    fn save(&self, record: &ReplicateRecord) -> Result<()> {
        write_atomic(&self.record_path(record.k), serde_json::to_string(record)?.as_bytes())
    }

    /// Scenario, master seed and every record saved so far, ordered by `k`.
    pub fn load_all(&self) -> Result<(ScenarioSpec, u64, Vec<ReplicateRecord>)> {
        let path = self.dir.join("study.json");
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!("{} contains no study; run `study` first", self.dir.display())));
        }
        let manifest: StudyManifest = serde_json::from_slice(&fs::read(&path)?)?;
        let mut records = Vec::new();
        for k in 0..manifest.scenario.k {
            if let Some(r) = self.load(k)? {
                records.push(r);
            }
        }
        Ok((manifest.scenario, manifest.master_seed, records))
    }
}

#[derive(Clone, Debug, Default)]
pub struct StudyOptions {
    /// Worker threads; 0 uses rayon's default.
    pub parallelism: usize,
    pub saem: SaemSettings,
    /// Persist records here and reuse those already present.
    pub store: Option<StudyStore>,
}

/// Output of [`run_study`].
#[derive(Clone, Debug)]
pub struct StudyResult {
    pub report: CoverageReport,
    pub records: Vec<ReplicateRecord>,
    /// Replicates loaded from the store instead of computed.
    pub resumed: usize,
}

/// Run all `K` replicates of a scenario and aggregate them. Records already
/// in the store are reused; new ones are saved as soon as they finish.
pub fn run_study(scenario: &ScenarioSpec, master_seed: u64, options: &StudyOptions) -> Result<StudyResult> {
    scenario.validate()?;
    options.saem.validate()?;
    if let Some(store) = &options.store {
        store.open(&StudyManifest { scenario: scenario.clone(), master_seed, saem: options.saem.clone() })?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcome: Vec<Result<(ReplicateRecord, bool)>> = pool.install(|| {
        (0..scenario.k)
            .into_par_iter()
            .map(|k| {
                if let Some(store) = &options.store {
                    if let Some(r) = store.load(k)? {
                        return Ok((r, true));
                    }
                }
                let record = run_replicate_with(scenario, k, replicate_seed(master_seed, k), &options.saem)?;
                if let Some(store) = &options.store {
                    store.save(&record)?;
                }
                log::info!("{}: replicate {} of {} done", scenario.name, k + 1, scenario.k);
                Ok((record, false))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(scenario.k);
    let mut resumed = 0;
    for o in outcome {
        let (r, loaded) = o?;
        resumed += loaded as usize;
        records.push(r);
    }
    Ok(StudyResult { report: aggregate(scenario, &records), records, resumed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lower: f64, upper: f64) -> Option<Interval> {
        Some(Interval { lower, upper })
    }

    #[test]
    fn mc_se_examples() {
        assert!((mc_se(0.9, 200) - 0.02121).abs() < 1e-5);
        assert_eq!(mc_se(0.0, 10), 0.0);
        assert_eq!(mc_se(1.0, 10), 0.0);
        assert!((mc_se(0.5, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn coverage_examples() {
        let all = vec![iv(0.0, 2.0); 4];
        assert_eq!(coverage_rate(&all, 1.0), Some(1.0));
        assert_eq!(coverage_rate(&all, 3.0), Some(0.0));
        let mut mixed = vec![iv(0.0, 2.0); 180];
        mixed.extend(vec![iv(5.0, 6.0); 20]);
        mixed.push(None);
        assert!((coverage_rate(&mixed, 1.0).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(coverage_rate(&[None, None], 1.0), None);
    }

    #[test]
    fn bias_examples() {
        assert_eq!(relative_bias_params(&[2.0, 2.0], 2.0), Some(0.0));
        assert!((relative_bias_params(&[2.2, 2.2], 2.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((relative_bias_params(&[2.0, 2.4], 2.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_bias_params(&[1.0], 0.0), None);

        assert_eq!(empirical_se(&[3.0, 3.0], 3.0), Some(0.0));
        assert!((empirical_se(&[4.0, 2.0], 3.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(empirical_se(&[4.0], 3.0), None);

        assert_eq!(relative_bias_se(&[0.5, 0.5], 0.5), Some(0.0));
        assert!((relative_bias_se(&[0.45, 0.45], 0.5).unwrap() + 10.0).abs() < 1e-12);
        assert!((relative_bias_se(&[0.5, 0.6], 0.5).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_bias_se(&[0.5], 0.0), None);
    }

    #[test]
    fn biased_estimates_inflate_empirical_se() {
        let est = [5.5, 5.6, 5.4, 5.5];
        let about_mean = stats::sample_sd(&est);
        assert!(empirical_se(&est, 5.0).unwrap() > about_mean);
    }

    #[test]
    fn asymptotic_only_runs_a_single_fit() {
        let mut s = scenario_preset("rich_emax").unwrap();
        s.methods = vec![Method::Asymptotic];
        let saem = SaemSettings { n_explore: 60, n_smooth: 30, ..Default::default() };
        let r = run_replicate_with(&s, 0, 3, &saem).unwrap();
        assert_eq!(r.fits, 1);
        let est = r.estimate.unwrap();
        assert!(est[..3].iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(r.methods.len(), 1);
        assert_eq!(r.methods[0].intervals.len(), 2);
    }
}
