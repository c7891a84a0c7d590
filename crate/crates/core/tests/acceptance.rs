//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 7, 8 and 11 run desk-scale coverage studies and
//! take several minutes on a single core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use nlmemboot::bootstrap::{
    correct_random_effects_evd, correct_residuals, resample_case, resample_conditional_np, resample_nonparametric, resample_parametric,
    standardized_residuals, CnpPools, CorrectionVariant, EtaDraw, NpPools, ResidualPool, Strata,
};
use nlmemboot::io::{bias_to_csv, coverage_to_csv};
use nlmemboot::model::{simulate_dataset, Dataset, Design, ErrorModel, ModelSpec, PopulationParams};
use nlmemboot::rng;
use nlmemboot::saem::{compute_ebe, fit_saem, sample_conditional, ConditionalSettings, EbeMode, SaemSettings};
use nlmemboot::stats::percentile_ci;
use nlmemboot::study::{mc_se, preset_names, run_study, scenario_preset, Method, StudyOptions, StudyResult};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Sample covariance with divisor n − 1, written out independently of the
/// library helpers.
fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let q = rows[0].len();
    let mean: Vec<f64> = (0..q).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n as f64).collect();
    DMatrix::from_fn(q, q, |i, j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1) as f64)
}

fn random_spd(r: &mut impl Rng, q: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(q, q, |_, _| normal(r));
    &a * a.transpose() + DMatrix::identity(q, q) * r.random_range(0.01..1.0)
}

fn evd_exactness() -> Outcome {
    let mut r = rng::stream(101, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(10..200);
        // correlated, shifted EBEs with an arbitrary covariance S
        let mix = random_spd(&mut r, 3);
        let ebe: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
                (0..3).map(|i| 0.3 + (0..3).map(|k| mix[(i, k)] * z[k]).sum::<f64>()).collect()
            })
            .collect();
        let omega = random_spd(&mut r, 3);
        let corrected = correct_random_effects_evd(&ebe, &omega, CorrectionVariant::CovarianceMatching).map_err(|e| e.to_string())?;
        let err = (covariance(&corrected) - &omega).norm() / omega.norm();
        worst = worst.max(err);
    }
    check(worst < 1e-10, format!("max relative Frobenius error {worst:.2e} over 50 pairs"))
}

fn residual_normalization() -> Outcome {
    let mut r = rng::stream(102, &[]);
    let (mut worst_mean, mut worst_sd): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = r.random_range(2..2000);
        let (loc, scale) = (r.random_range(-5.0..5.0), r.random_range(0.01..10.0));
        let raw: Vec<f64> = (0..n).map(|_| loc + scale * normal(&mut r)).collect();
        let c = correct_residuals(&raw).map_err(|e| e.to_string())?;
        let mean = c.iter().sum::<f64>() / n as f64;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs() / sd);
        worst_sd = worst_sd.max((sd - 1.0).abs());
    }
    check(worst_mean < 1e-12 && worst_sd < 1e-12, format!("max |mean|/SD {worst_mean:.2e}, max |SD - 1| {worst_sd:.2e}"))
}

/// Insertion sort followed by type-7 interpolation on 1-based order
/// statistics.
fn oracle_quantile(values: &[f64], p: f64) -> f64 {
    let mut x = values.to_vec();
    for i in 1..x.len() {
        let mut j = i;
        while j > 0 && x[j - 1] > x[j] {
            x.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = x.len();
    let h = (n as f64 - 1.0) * p + 1.0;
    let lo = h.floor();
    let k = lo as usize;
    if k >= n {
        x[n - 1]
    } else {
        x[k - 1] + (h - lo) * (x[k] - x[k - 1])
    }
}

fn percentile_oracle() -> Outcome {
    let mut r = rng::stream(103, &[]);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = r.random_range(2..500);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0) * 10f64.powi(r.random_range(-3..4))).collect();
        for alpha in [0.05, 0.1] {
            let ci = percentile_ci(&values, alpha).ok_or("no interval")?;
            if ci.lower.to_bits() != oracle_quantile(&values, alpha / 2.0).to_bits()
                || ci.upper.to_bits() != oracle_quantile(&values, 1.0 - alpha / 2.0).to_bits()
            {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} of 200 intervals differ from the oracle"))
}

fn mc_se_value() -> Outcome {
    let v = mc_se(0.9, 200);
    check((v - 0.02121).abs() <= 1e-4, format!("mc_se(0.9, 200) = {v:.6}"))
}

fn conjugate_sampler() -> Outcome {
    let spec = ModelSpec::random_intercept(ErrorModel::Constant);
    let (mu, omega2, sigma) = (2.0, 1.5, 0.8);
    let theta = PopulationParams { mu: vec![mu], omega: DMatrix::from_element(1, 1, omega2), sigma: vec![sigma] };
    let ds = Dataset {
        observations: vec![vec![2.5, 3.1, 2.2], vec![0.1, -0.4, 0.6], vec![2.0, 2.0, 2.1], vec![4.2, 3.3, 5.0]],
        design: Design { subjects: Design::group("g", 4, &[0.0; 3], 1) },
        provenance: None,
    };
    let m = 10_000;
    let draws = sample_conditional(&spec, &ds, &theta, m, &ConditionalSettings::default(), 104).map_err(|e| e.to_string())?;
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for (s, y) in draws.subjects.iter().zip(&ds.observations) {
        let n = y.len() as f64;
        let prec = 1.0 / omega2 + n / (sigma * sigma);
        let post_mean = (y.iter().sum::<f64>() - n * mu) / (sigma * sigma) / prec;
        let post_var = 1.0 / prec;
        let etas: Vec<f64> = s.eta.iter().map(|e| e[0]).collect();
        let mean = etas.iter().sum::<f64>() / m as f64;
        let var = etas.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        worst_mean = worst_mean.max((mean - post_mean).abs() / post_var.sqrt());
        worst_var = worst_var.max((var / post_var - 1.0).abs());
    }
    check(
        worst_mean < 0.02 && worst_var < 0.05,
        format!("max mean error {worst_mean:.4} posterior SD, max variance error {:.2}%", 100.0 * worst_var),
    )
}

fn saem_closed_form() -> Outcome {
    let spec = ModelSpec::random_intercept(ErrorModel::Constant);
    let theta = PopulationParams { mu: vec![10.0], omega: DMatrix::from_element(1, 1, 4.0), sigma: vec![1.0] };
    let design = Design { subjects: Design::group("g", 100, &[0.0; 4], 1) };
    let mut rel: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for seed in 0..10 {
        let ds = simulate_dataset(&spec, &theta, &design, 600 + seed).map_err(|e| e.to_string())?;
        let est = fit_saem(&spec, &ds, &theta, &SaemSettings { seed: 700 + seed, ..Default::default() }).map_err(|e| e.to_string())?;
        // balanced one-way random effects maximum likelihood
        let (n_sub, n) = (100.0, 4.0);
        let means: Vec<f64> = ds.observations.iter().map(|y| y.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / n_sub;
        let ssw: f64 = ds.observations.iter().zip(&means).map(|(y, m)| y.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sum();
        let s2 = ssw / (n_sub * (n - 1.0));
        let between = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / n_sub;
        let ml = [grand, (between - s2 / n).max(0.0), s2.sqrt()];
        for p in 0..3 {
            rel[p].push((est.values[p] - ml[p]).abs() / ml[p].abs());
        }
    }
    let medians: Vec<f64> = rel
        .iter_mut()
        .map(|v| {
            v.sort_by(f64::total_cmp);
            (v[4] + v[5]) / 2.0
        })
        .collect();
    check(
        medians.iter().all(|&m| m < 0.02),
        format!("median relative error mu {:.3}%, omega2 {:.3}%, sigma {:.3}%", 100.0 * medians[0], 100.0 * medians[1], 100.0 * medians[2]),
    )
}

fn structure_preservation() -> Outcome {
    let names = preset_names();
    let mut r = rng::stream(109, &[]);
    for i in 0..20u64 {
        let scenario = scenario_preset(&names[r.random_range(0..names.len())]).map_err(|e| e.to_string())?;
        let spec = scenario.spec();
        let theta = &scenario.theta_true;
        let ds = simulate_dataset(&spec, theta, &scenario.design, 900 + i).map_err(|e| e.to_string())?;
        let draws = sample_conditional(&spec, &ds, theta, 5, &ConditionalSettings::default(), i).map_err(|e| e.to_string())?;
        let ebe = compute_ebe(&draws, EbeMode::Mode);
        let np = NpPools::new(&ebe, &standardized_residuals(&spec, theta, &ds, &ebe), &theta.omega, CorrectionVariant::default())
            .map_err(|e| e.to_string())?;
        let cnp = CnpPools::new(&draws, ResidualPool::PerSubject).map_err(|e| e.to_string())?;
        let outputs = [
            ("par", resample_parametric(&spec, theta, &ds.design, &mut r)),
            ("np", resample_nonparametric(&spec, theta, &np, &ds.design, &mut r)),
            ("cnp", resample_conditional_np(&spec, theta, &cnp, &ds.design, EtaDraw::default(), &mut r)),
        ];
        for (name, out) in outputs {
            let out = out.map_err(|e| e.to_string())?;
            let same = out.design.subjects.len() == ds.design.subjects.len()
                && out.design.subjects.iter().zip(&ds.design.subjects).all(|(a, b)| {
                    a.id == b.id
                        && a.group == b.group
                        && a.doses.len() == b.doses.len()
                        && a.doses.iter().zip(&b.doses).all(|(x, y)| x.to_bits() == y.to_bits())
                });
            if !same {
                return Err(format!("{name} changed the design of {}", scenario.name));
            }
        }
        for strata in [Strata::Group, Strata::DesignPattern] {
            let out = resample_case(&ds, Some(strata), &mut r).map_err(|e| e.to_string())?;
            let key = |d: &Dataset| -> Vec<String> {
                let mut k: Vec<String> = d
                    .design
                    .subjects
                    .iter()
                    .map(|s| match strata {
                        Strata::Group => s.group.clone().unwrap_or_default(),
                        Strata::DesignPattern => format!("{:?}", s.doses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
                    })
                    .collect();
                k.sort();
                k
            };
            if key(&out) != key(&ds) {
                return Err(format!("case bootstrap stratified by {strata:?} changed stratum sizes in {}", scenario.name));
            }
        }
    }
    check(true, "20 datasets: par/np/cnp designs bit-identical, stratified case keeps stratum sizes".into())
}

fn determinism() -> Outcome {
    let mut scenario = scenario_preset("rich_emax").map_err(|e| e.to_string())?;
    scenario.k = 2;
    scenario.b = 2;
    let mut csvs = Vec::new();
    for parallelism in [1, 8, 1, 8] {
        let res = run_study(&scenario, 2024, &StudyOptions { parallelism, ..Default::default() }).map_err(|e| e.to_string())?;
        csvs.push((coverage_to_csv(&res.report.coverage), bias_to_csv(&res.report.bias)));
    }
    check(csvs.iter().all(|c| *c == csvs[0]), "coverage and bias CSVs identical across 4 runs at parallelism 1 and 8".into())
}

fn desk_study(name: &str, seed: u64) -> Result<StudyResult, String> {
    let mut scenario = scenario_preset(name).map_err(|e| e.to_string())?;
    scenario.k = 20;
    scenario.b = 50;
    scenario.methods = Method::ALL.to_vec();
    run_study(&scenario, seed, &StudyOptions::default()).map_err(|e| e.to_string())
}

fn coverage_of(res: &StudyResult, method: Method, parameter: &str, alpha: f64) -> Option<f64> {
    res.report.coverage.iter().find(|r| r.method == method && r.parameter == parameter && r.alpha == alpha).and_then(|r| r.coverage)
}

fn rich_emax_coverage(res: &StudyResult) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for method in Method::ALL {
        for p in ["E0", "Emax"] {
            let c = coverage_of(res, method, p, 0.1);
            ok &= c.is_some_and(|c| (0.70..=1.0).contains(&c));
            parts.push(format!("{method}/{p}={}", c.map_or("NA".into(), |c| format!("{c:.2}"))));
        }
    }
    check(ok, parts.join(" "))
}

fn nested_intervals(res: &StudyResult) -> Outcome {
    let mut checked = 0;
    for record in &res.records {
        for m in record.methods.iter().filter(|m| m.method != Method::Asymptotic) {
            let (Some(i90), Some(i95)) = (m.at(0.1), m.at(0.05)) else { continue };
            for (a, b) in i90.intervals.iter().zip(&i95.intervals) {
                if let (Some(a), Some(b)) = (a, b) {
                    if !b.contains_interval(a) {
                        return Err(format!("replicate {} {}: 95% CI {b:?} does not contain 90% CI {a:?}", record.k, m.method));
                    }
                    checked += 1;
                }
            }
        }
    }
    check(checked > 0, format!("{checked} interval pairs nested"))
}

fn increased_error_trend() -> Outcome {
    let res = desk_study("rich_hill_sigma05", 8)?;
    let variances = ["omega2_E0", "omega2_Emax", "omega2_ED50"];
    let mut under = Vec::new();
    for v in variances {
        let row = res.report.bias.iter().find(|r| r.method == Method::Asymptotic && r.parameter == v);
        if let Some(rb) = row.and_then(|r| r.rb_se_pct) {
            // mean SE ratio < 1 is a negative relative bias
            if rb < 0.0 {
                under.push(format!("{v} ({rb:+.1}%)"));
            }
        }
    }
    let mut order = Vec::new();
    let mut ordered = true;
    for alpha in [0.1, 0.05] {
        let cnp = coverage_of(&res, Method::Cnp, "omega2_Emax", alpha);
        let np = coverage_of(&res, Method::Np, "omega2_Emax", alpha);
        ordered &= matches!((cnp, np), (Some(c), Some(n)) if c >= n);
        order.push(format!("alpha {alpha}: cnp {cnp:?} vs np {np:?}"));
    }
    check(
        under.len() >= 2 && ordered,
        format!("asymptotic SE below empirical for [{}]; omega2_Emax coverage {}", under.join(", "), order.join(", ")),
    )
}

fn run(id: usize, what: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {id:>2} {tag} [{secs:.1}s] {what}: {detail}");
    ok
}

fn main() {
    let mut results = vec![
        run(1, "EVD correction reproduces omega", evd_exactness),
        run(2, "residual pool normalization", residual_normalization),
        run(3, "percentile CI matches oracle bit for bit", percentile_oracle),
        run(4, "MC standard error", mc_se_value),
        run(5, "conditional sampler vs conjugate posterior", conjugate_sampler),
        run(6, "SAEM vs closed-form ML", saem_closed_form),
    ];
    // criterion 11 inspects the bootstrap runs of criterion 7
    let mut rich: Option<StudyResult> = None;
    results.push(run(7, "rich Emax coverage of 90% CI for E0 and Emax", || {
        let res = rich.insert(desk_study("rich_emax", 7)?);
        rich_emax_coverage(res)
    }));
    results.push(run(8, "increased error trend", increased_error_trend));
    results.push(run(9, "structure preservation", structure_preservation));
    results.push(run(10, "determinism across thread counts", determinism));
    results.push(run(11, "nested 90%/95% bootstrap CIs", || nested_intervals(rich.as_ref().ok_or("criterion 7 produced no study")?)));
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
