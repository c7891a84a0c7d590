//! Sampling the conditional distributions `p(η_i | y_i; θ̂)` after a fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{self, Chain, Counts, MhSettings, Scales, Scratch, Target};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, PopulationParams};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSettings {
    /// Adaptive sweeps discarded before sampling.
    pub burn_in: usize,
    /// Sweeps (at frozen scales) used to estimate the autocorrelation time.
    pub pilot: usize,
    pub max_thin: usize,
    pub mh: MhSettings,
}

impl Default for ConditionalSettings {
    fn default() -> Self {
        ConditionalSettings { burn_in: 500, pilot: 1000, max_thin: 50, mh: MhSettings::default() }
    }
}

/// Retained draws for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDraws {
    pub id: String,
    /// `M` random-effect vectors.
    pub eta: Vec<Vec<f64>>,
    /// Unnormalized `log p(η | y; θ̂)` of each draw.
    pub log_density: Vec<f64>,
    /// `M × n_i` standardized residuals `(y − f(x, μ̂, η^m)) / g`.
    pub residuals: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Acceptance rates of the prior, joint and componentwise kernels.
    pub acceptance: [f64; 3],
    pub thin: usize,
}

/// `M` conditional draws per subject, in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDraws {
    pub m: usize,
    pub subjects: Vec<SubjectDraws>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbeMode {
    /// Sample mean of the draws.
    Mean,
    /// The draw with the highest conditional density.
    Mode,
}

/// Draw `m` approximately independent samples of each subject's random
/// effects. After `burn_in` adaptive sweeps and a pilot run, the thinning
/// interval is `max(⌈τ⌉, ⌈10τ/m⌉)` (capped at `max_thin`) where `τ` is the
/// largest integrated autocorrelation time over components.
pub fn sample_conditional(
    spec: &ModelSpec,
    dataset: &Dataset,
    theta_hat: &PopulationParams,
    m: usize,
    settings: &ConditionalSettings,
    seed: u64,
) -> Result<ConditionalDraws> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one conditional draw".into()));
    }
    theta_hat.validate(spec)?;
    dataset.validate()?;
    settings.mh.validate()?;
    let target = Target::new(spec, &theta_hat.mu, &theta_hat.omega, &theta_hat.sigma);
    let subjects = dataset
        .design
        .subjects
        .par_iter()
        .zip(dataset.observations.par_iter())
        .map(|(s, y)| sample_subject(&target, &theta_hat.omega, &s.id, &s.doses, y, m, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalDraws { m, subjects })
}

fn sample_subject(
    target: &Target,
    omega: &nalgebra::DMatrix<f64>,
    id: &str,
    doses: &[f64],
    y: &[f64],
    m: usize,
    settings: &ConditionalSettings,
    seed: u64,
) -> Result<SubjectDraws> {
    let spec = target.spec;
    let q = target.q;
    let mut rng = rng::stream(seed, &[tag::CONDITIONAL, rng::hash_str(id)]);
    let mut scratch = Scratch::new(spec.n_params(), q);
    let mut chain = Chain { eta: vec![0.0; q], log_lik: 0.0 };
    chain.log_lik = target.log_lik(&chain.eta, doses, y, &mut scratch.psi);
    let mut scales = Scales::new(omega, &settings.mh);

    const BATCH: usize = 20;
    let mut batch = Counts::new(q);
    for sweep in 0..settings.burn_in {
        kernel::sweep(target, doses, y, &mut chain, &scales, &settings.mh, &mut batch, &mut scratch, &mut rng);
        if (sweep + 1) % BATCH == 0 {
            scales.adapt(&batch, &settings.mh);
            batch = Counts::new(q);
        }
    }

    let mut tau: f64 = 1.0;
    if q > 0 && settings.pilot > 0 {
        let mut pilot = vec![Vec::with_capacity(settings.pilot); q];
        let mut ignored = Counts::new(q);
        for _ in 0..settings.pilot {
            kernel::sweep(target, doses, y, &mut chain, &scales, &settings.mh, &mut ignored, &mut scratch, &mut rng);
            for (d, series) in pilot.iter_mut().enumerate() {
                series.push(chain.eta[d]);
            }
        }
        tau = pilot.iter().map(|s| integrated_autocorrelation_time(s)).fold(1.0, f64::max);
    }
    let thin = (tau.ceil() as usize).max((10.0 * tau / m as f64).ceil() as usize).clamp(1, settings.max_thin.max(1));

    let mut counts = Counts::new(q);
    let mut eta = Vec::with_capacity(m);
    let mut log_density = Vec::with_capacity(m);
    let mut residuals = Vec::with_capacity(m);
    for _ in 0..m {
        for _ in 0..thin {
            kernel::sweep(target, doses, y, &mut chain, &scales, &settings.mh, &mut counts, &mut scratch, &mut rng);
        }
        eta.push(chain.eta.clone());
        log_density.push(chain.log_lik + target.log_prior(&chain.eta));
        spec.individual(target.mu, &chain.eta, &mut scratch.psi);
        residuals.push(
            doses
                .iter()
                .zip(y)
                .map(|(&x, &v)| {
                    let f = spec.structural.eval(&scratch.psi, x);
                    (v - f) / spec.error_model.sd(target.sigma, f)
                })
                .collect(),
        );
    }
    if q > 0 && counts.accepted() == 0 {
        return Err(Error::SamplerFailure(format!("subject {id}: no proposal accepted after adaptation")));
    }

    let mean: Vec<f64> = (0..q).map(|d| eta.iter().map(|e: &Vec<f64>| e[d]).sum::<f64>() / m as f64).collect();
    let sd: Vec<f64> = (0..q)
        .map(|d| if m < 2 { 0.0 } else { (eta.iter().map(|e| (e[d] - mean[d]).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt() })
        .collect();
    Ok(SubjectDraws { id: id.to_string(), eta, log_density, residuals, mean, sd, acceptance: counts.rates(), thin })
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
pub(crate) fn integrated_autocorrelation_time(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 1.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let acov = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = acov(0);
    if g0 <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut lag = 0;
    while lag + 1 < n / 2 {
        let pair = acov(lag) + acov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    ((2.0 * sum - g0) / g0).max(1.0)
}

/// Per-subject point estimates of the random effects from conditional draws.
pub fn compute_ebe(draws: &ConditionalDraws, mode: EbeMode) -> Vec<Vec<f64>> {
    draws
        .subjects
        .iter()
        .map(|s| match mode {
            EbeMode::Mean => s.mean.clone(),
            EbeMode::Mode => {
                let best = s.log_density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
                s.eta[best].clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(values: &[f64]) -> ConditionalDraws {
        let m = values.len();
        let mean = values.iter().sum::<f64>() / m as f64;
        ConditionalDraws {
            m,
            subjects: vec![SubjectDraws {
                id: "1".into(),
                eta: values.iter().map(|&v| vec![v]).collect(),
                log_density: values.iter().map(|v| -v * v).collect(),
                residuals: vec![vec![0.0]; m],
                mean: vec![mean],
                sd: vec![0.0],
                acceptance: [0.5; 3],
                thin: 1,
            }],
        }
    }

    #[test]
    fn ebe_of_symmetric_draws() {
        let d = draws(&[-1.0, 0.0, 1.0]);
        assert_eq!(compute_ebe(&d, EbeMode::Mean), vec![vec![0.0]]);
        assert_eq!(compute_ebe(&d, EbeMode::Mode), vec![vec![0.0]]);
    }

    #[test]
    fn ebe_of_identical_draws() {
        let d = draws(&[0.3, 0.3, 0.3]);
        assert_eq!(compute_ebe(&d, EbeMode::Mean)[0][0], 0.3);
        assert_eq!(compute_ebe(&d, EbeMode::Mode)[0][0], 0.3);
    }

    #[test]
    fn iact_of_white_noise_is_near_one() {
        use rand::Rng;
        let mut r = crate::rng::stream(1, &[]);
        let x: Vec<f64> = (0..5000).map(|_| r.random::<f64>()).collect();
        let tau = integrated_autocorrelation_time(&x);
        assert!(tau < 1.3, "{tau}");
    }

    #[test]
    fn iact_of_ar1_matches_theory() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut r = crate::rng::stream(2, &[]);
        let rho: f64 = 0.8;
        let mut v = 0.0;
        let x: Vec<f64> = (0..50_000)
            .map(|_| {
                v = rho * v + r.sample::<f64, _>(StandardNormal);
                v
            })
            .collect();
        // (1 + ρ)/(1 − ρ) = 9
        let tau = integrated_autocorrelation_time(&x);
        assert!((tau - 9.0).abs() < 1.5, "{tau}");
    }

    fn conjugate_case(sigma: f64) -> (ModelSpec, Dataset, PopulationParams) {
        use crate::model::{Design, ErrorModel};
        let spec = ModelSpec::random_intercept(ErrorModel::Constant);
        let theta = PopulationParams { mu: vec![2.0], omega: nalgebra::DMatrix::from_element(1, 1, 1.5), sigma: vec![sigma] };
        let design = Design { subjects: Design::group("g", 3, &[0.0; 3], 1) };
        let ds = Dataset { observations: vec![vec![2.5, 3.1, 2.2], vec![0.1, -0.4, 0.6], vec![2.0, 2.0, 2.1]], design, provenance: None };
        (spec, ds, theta)
    }

    #[test]
    fn draws_match_conjugate_posterior() {
        let (spec, ds, theta) = conjugate_case(0.8);
        let draws = sample_conditional(&spec, &ds, &theta, 3000, &ConditionalSettings::default(), 21).unwrap();
        for (s, y) in draws.subjects.iter().zip(&ds.observations) {
            let prec = 1.0 / 1.5 + 3.0 / 0.64;
            let ybar = y.iter().sum::<f64>() / 3.0;
            let post_mean = (3.0 / 0.64) * (ybar - 2.0) / prec;
            let post_sd = prec.sqrt().recip();
            assert!((s.mean[0] - post_mean).abs() < 0.1 * post_sd, "{} vs {}", s.mean[0], post_mean);
            assert!((s.sd[0] / post_sd - 1.0).abs() < 0.1, "{} vs {}", s.sd[0], post_sd);
            assert_eq!(s.residuals.len(), 3000);
            assert_eq!(s.residuals[0].len(), 3);
        }
    }

    #[test]
    fn single_draw_shape() {
        let (spec, ds, theta) = conjugate_case(0.8);
        let draws = sample_conditional(&spec, &ds, &theta, 1, &ConditionalSettings::default(), 2).unwrap();
        assert_eq!(draws.m, 1);
        assert!(draws.subjects.iter().all(|s| s.eta.len() == 1 && s.eta[0].len() == 1));
    }

    #[test]
    fn tiny_noise_concentrates_the_posterior() {
        let (spec, ds, theta) = conjugate_case(1e-4);
        let draws = sample_conditional(&spec, &ds, &theta, 200, &ConditionalSettings::default(), 5).unwrap();
        for s in &draws.subjects {
            assert!(s.sd[0] < 0.01 * 1.5f64.sqrt(), "{}", s.sd[0]);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let (spec, ds, theta) = conjugate_case(0.8);
        let a = sample_conditional(&spec, &ds, &theta, 50, &ConditionalSettings::default(), 8).unwrap();
        let b = sample_conditional(&spec, &ds, &theta, 50, &ConditionalSettings::default(), 8).unwrap();
        assert_eq!(a, b);
        assert!(sample_conditional(&spec, &ds, &theta, 0, &ConditionalSettings::default(), 8).is_err());
    }
}
