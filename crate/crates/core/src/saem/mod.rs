//! Maximum-likelihood estimation by stochastic approximation EM.
//!
//! Each iteration samples the random effects of every subject with a few
//! Metropolis–Hastings sweeps ([`kernel`]), updates stochastic
//! approximations of the complete-data sufficient statistics with step size
//! `γ_k`, and maximizes the complete-data likelihood in closed form:
//!
//! * `γ_k = 1` during the burn-in-free exploration phase (`n_explore`
//!   iterations), then `γ_k = 1/(k − n_explore)` during the smoothing phase;
//! * Gaussian-scale means from `s₁/N`, `Ω` from `s₂/N − …` with unestimated
//!   covariances zeroed, σ from the mean squared (scaled) residual;
//! * parameters without random effects are updated by damped Newton steps on
//!   the conditional log-likelihood, averaged with the same `γ_k`.
//!
//! During the first half of the exploration phase variances may shrink by
//! at most a factor [`SaemSettings::anneal_factor`] per iteration.

mod conditional;
mod fim;
pub(crate) mod kernel;

pub use conditional::{compute_ebe, sample_conditional, ConditionalDraws, ConditionalSettings, EbeMode, SubjectDraws};
pub use fim::{asymptotic_ci, compute_fim, FimResult};
pub use kernel::MhSettings;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ErrorModel, ModelSpec, PopulationParams};
use crate::rng::{self, tag};
use kernel::{Chain, Counts, Scales, Scratch, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaemSettings {
    /// Iterations that only run the sampler.
    pub n_burn: usize,
    /// Iterations with step size 1.
    pub n_explore: usize,
    /// Iterations with decreasing step size.
    pub n_smooth: usize,
    /// Chains per subject; `None` picks 1 when N ≥ 50, otherwise enough
    /// chains that N·chains ≥ 50.
    pub n_chains: Option<usize>,
    pub mh: MhSettings,
    pub anneal_factor: f64,
    /// Lower bound on variances of random effects.
    pub omega_floor: f64,
    /// Lower bound on residual error coefficients.
    pub sigma_floor: f64,
    pub keep_trace: bool,
    pub seed: u64,
}

impl Default for SaemSettings {
    fn default() -> Self {
        SaemSettings {
            n_burn: 5,
            n_explore: 300,
            n_smooth: 100,
            n_chains: None,
            mh: MhSettings::default(),
            anneal_factor: 0.97,
            omega_floor: 1e-10,
            sigma_floor: 1e-6,
            keep_trace: true,
            seed: 12345,
        }
    }
}

impl SaemSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn == 0 || self.n_explore == 0 || self.n_smooth == 0 || self.n_chains == Some(0) {
            return Err(Error::InvalidConfig("SAEM iteration and chain counts must be >= 1".into()));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::InvalidConfig("anneal factor must lie in (0, 1]".into()));
        }
        self.mh.validate()
    }

    pub fn chains_for(&self, n_subjects: usize) -> usize {
        self.n_chains.unwrap_or_else(|| if n_subjects >= 50 { 1 } else { 50usize.div_ceil(n_subjects.max(1)) })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SaemSettings { seed, ..self.clone() }
    }
}

/// Result of [`fit_saem`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub theta_hat: PopulationParams,
    pub param_names: Vec<String>,
    /// Reported parameter values aligned with `param_names`.
    pub values: Vec<f64>,
    /// Standard errors aligned with `param_names`; `None` where unavailable.
    pub se: Vec<Option<f64>>,
    /// Fisher information over the reported parameters, row-major.
    pub fim: Vec<Vec<f64>>,
    /// Reported parameter vector after every iteration.
    pub trace: Vec<Vec<f64>>,
    pub seed: u64,
}

struct SubjectRef<'a> {
    id: &'a str,
    doses: &'a [f64],
    y: &'a [f64],
}

/// Fit θ by SAEM starting from `init`.
pub fn fit_saem(spec: &ModelSpec, dataset: &Dataset, init: &PopulationParams, settings: &SaemSettings) -> Result<PopulationEstimate> {
    init.validate(spec)?;
    dataset.validate()?;
    settings.validate()?;

    let first = dataset.observations[0][0];
    if dataset.observations.iter().flatten().all(|&v| v == first) {
        return Err(Error::EstimationFailure {
            reason: "all observations are identical; the residual variance is not identifiable".into(),
            trace: Vec::new(),
        });
    }

    // canonical order: results do not depend on the order subjects are listed in
    let mut subjects: Vec<SubjectRef> =
        dataset.design.subjects.iter().zip(&dataset.observations).map(|(s, y)| SubjectRef { id: &s.id, doses: &s.doses, y }).collect();
    subjects.sort_by(|a, b| a.id.cmp(b.id));

    let n = subjects.len();
    let n_obs = dataset.n_observations() as f64;
    let q = spec.n_random();
    let random_idx = spec.random_indices();
    let beta_idx = spec.non_random_estimated();
    let n_chains = settings.chains_for(n);
    let total = settings.n_burn + settings.n_explore + settings.n_smooth;

    let mut theta = init.clone();
    // streams follow the id-sorted rank, so subjects with equal data in equal
    // positions are treated identically whatever their ids
    let mut rngs: Vec<_> =
        (0..n).flat_map(|i| (0..n_chains).map(move |c| rng::stream(settings.seed, &[tag::SAEM_SUBJECT, i as u64, c as u64]))).collect();
    let mut chains: Vec<Chain> = (0..n * n_chains).map(|_| Chain { eta: vec![0.0; q], log_lik: 0.0 }).collect();
    let mut scales = Scales::new(&theta.omega, &settings.mh);
    let mut scratch = Scratch::new(spec.n_params(), q);

    let mut s1 = DVector::<f64>::zeros(q);
    let mut s2 = DMatrix::<f64>::zeros(q, q);
    let mut s_res = 0.0;
    let mut trace = Vec::new();
    let fail = |reason: String, trace: &Vec<Vec<f64>>| Error::EstimationFailure { reason, trace: trace.clone() };

    for k in 0..total {
        let target = Target::new(spec, &theta.mu, &theta.omega, &theta.sigma);
        let mut counts = Counts::new(q);
        for (idx, chain) in chains.iter_mut().enumerate() {
            let s = &subjects[idx / n_chains];
            chain.log_lik = target.log_lik(&chain.eta, s.doses, s.y, &mut scratch.psi);
            kernel::sweep(&target, s.doses, s.y, chain, &scales, &settings.mh, &mut counts, &mut scratch, &mut rngs[idx]);
        }
        scales.adapt(&counts, &settings.mh);
        if k < settings.n_burn {
            continue;
        }
        let it = k - settings.n_burn;
        let step = if it < settings.n_explore { 1.0 } else { 1.0 / (it + 1 - settings.n_explore) as f64 };
        let w = 1.0 / n_chains as f64;

        // Gaussian-scale individual parameters φ_i = φ_pop + η_i
        let phi_pop: Vec<f64> = random_idx.iter().map(|&i| spec.params[i].transform.to_gaussian(theta.mu[i])).collect();
        let mut stat1 = DVector::<f64>::zeros(q);
        let mut stat2 = DMatrix::<f64>::zeros(q, q);
        for chain in &chains {
            for a in 0..q {
                let pa = phi_pop[a] + chain.eta[a];
                stat1[a] += w * pa;
                for b in 0..=a {
                    stat2[(a, b)] += w * pa * (phi_pop[b] + chain.eta[b]);
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                stat2[(b, a)] = stat2[(a, b)];
            }
        }

        // parameters without variability: Newton on the sampled complete data
        if !beta_idx.is_empty() {
            let etas: Vec<&[f64]> = chains.iter().map(|c| c.eta.as_slice()).collect();
            for &p in &beta_idx {
                let current = theta.mu[p];
                let best = newton_non_random(spec, &theta, p, &subjects, &etas, n_chains, &mut scratch.psi);
                theta.mu[p] = current + step * (best - current);
            }
        }

        // residual statistic at the updated fixed effects
        let mut stat_res = 0.0;
        if spec.error_model != ErrorModel::Combined {
            for (idx, chain) in chains.iter().enumerate() {
                let s = &subjects[idx / n_chains];
                spec.individual(&theta.mu, &chain.eta, &mut scratch.psi);
                for (&x, &v) in s.doses.iter().zip(s.y) {
                    let f = spec.structural.eval(&scratch.psi, x);
                    let r = match spec.error_model {
                        ErrorModel::Proportional => (v - f) / f.abs(),
                        _ => v - f,
                    };
                    stat_res += w * r * r;
                }
            }
        }

        s1 += (stat1 - &s1) * step;
        s2 += (stat2 - &s2) * step;
        s_res += step * (stat_res - s_res);

        // M-step
        let old_omega = theta.omega.clone();
        let old_sigma = theta.sigma.clone();
        let mut new_pop = phi_pop.clone();
        for (a, &i) in random_idx.iter().enumerate() {
            if spec.params[i].estimated {
                new_pop[a] = s1[a] / n as f64;
            }
        }
        let m = &s1 / n as f64;
        let mut omega = DMatrix::<f64>::zeros(q, q);
        for a in 0..q {
            for b in 0..q {
                omega[(a, b)] = s2[(a, b)] / n as f64 - m[a] * new_pop[b] - new_pop[a] * m[b] + new_pop[a] * new_pop[b];
            }
        }
        for a in 0..q {
            for b in 0..q {
                if a != b && !spec.omega_pattern.get(random_idx[a], random_idx[b]) {
                    omega[(a, b)] = 0.0;
                }
            }
        }
        let annealing = it < settings.n_explore / 2;
        for a in 0..q {
            if annealing {
                omega[(a, a)] = omega[(a, a)].max(settings.anneal_factor * old_omega[(a, a)]);
            }
            omega[(a, a)] = omega[(a, a)].max(settings.omega_floor);
        }
        omega = crate::linalg::symmetrize(&omega);
        if omega.clone().cholesky().is_none() {
            omega = crate::linalg::project_psd(&omega);
            for a in 0..q {
                omega[(a, a)] = omega[(a, a)].max(settings.omega_floor) * (1.0 + 1e-9);
            }
        }

        // Gaussian-scale means to natural scale; the η of each chain is kept
        // relative to the new population value
        for (a, &i) in random_idx.iter().enumerate() {
            theta.mu[i] = spec.params[i].transform.from_gaussian(new_pop[a]);
            let shift = phi_pop[a] - new_pop[a];
            for chain in chains.iter_mut() {
                chain.eta[a] += shift;
            }
        }
        theta.omega = omega;

        match spec.error_model {
            ErrorModel::Constant | ErrorModel::Proportional => {
                let mut sig = (s_res / n_obs).sqrt();
                if annealing {
                    sig = sig.max(settings.anneal_factor * old_sigma[0]);
                }
                theta.sigma[0] = sig.max(settings.sigma_floor);
            }
            ErrorModel::Combined => {
                let etas: Vec<&[f64]> = chains.iter().map(|c| c.eta.as_slice()).collect();
                let best = newton_combined_sigma(spec, &theta, &subjects, &etas, n_chains, &mut scratch.psi);
                for c in 0..2 {
                    let mut v = theta.sigma[c] + step * (best[c] - theta.sigma[c]);
                    if annealing {
                        v = v.max(settings.anneal_factor * old_sigma[c]);
                    }
                    theta.sigma[c] = v.max(settings.sigma_floor);
                }
            }
        }

        let v = theta.to_vector(spec);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure(format!("non-finite parameter at iteration {k}")));
        }
        if settings.keep_trace {
            trace.push(v);
        }
        if counts.proposed() > 0 && counts.accepted() == 0 && k > settings.n_burn + 10 {
            return Err(fail(format!("no MH proposal accepted at iteration {k}"), &trace));
        }
    }

    let fim = compute_fim(spec, dataset, &theta)?;
    Ok(PopulationEstimate {
        param_names: spec.param_names(),
        values: theta.to_vector(spec),
        se: fim.se,
        fim: fim.fim,
        theta_hat: theta,
        trace,
        seed: settings.seed,
    })
}

/// Negative complete-data log-likelihood of all chains.
fn neg_complete_ll(
    spec: &ModelSpec,
    mu: &[f64],
    sigma: &[f64],
    subjects: &[SubjectRef],
    etas: &[&[f64]],
    n_chains: usize,
    psi: &mut [f64],
) -> f64 {
    let target = Target { spec, mu, sigma, factor: DMatrix::zeros(0, 0), precision: Vec::new(), q: 0 };
    let mut total = 0.0;
    for (idx, eta) in etas.iter().enumerate() {
        let s = &subjects[idx / n_chains];
        total -= target.log_lik(eta, s.doses, s.y, psi);
    }
    total
}

/// A damped one-dimensional Newton minimization with central differences.
/// Steps are limited to `max(max_rel·|x|, min_limit)`.
fn newton_1d(mut x: f64, max_rel: f64, min_limit: f64, iterations: usize, mut h: impl FnMut(f64) -> f64) -> f64 {
    for _ in 0..iterations {
        let d = (1e-4 * x.abs()).max(1e-6);
        let (hm, h0, hp) = (h(x - d), h(x), h(x + d));
        if !h0.is_finite() {
            break;
        }
        let g = (hp - hm) / (2.0 * d);
        let curv = (hp - 2.0 * h0 + hm) / (d * d);
        let limit = (max_rel * x.abs()).max(min_limit);
        let mut step = if curv > 0.0 { -g / curv } else { -g.signum() * limit };
        step = step.clamp(-limit, limit);
        let mut improved = false;
        for _ in 0..6 {
            let cand = h(x + step);
            if cand.is_finite() && cand < h0 {
                x += step;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

fn newton_non_random(
    spec: &ModelSpec,
    theta: &PopulationParams,
    p: usize,
    subjects: &[SubjectRef],
    etas: &[&[f64]],
    n_chains: usize,
    psi: &mut [f64],
) -> f64 {
    let mut mu = theta.mu.clone();
    newton_1d(theta.mu[p], 0.2, 1e-3, 2, |v| {
        mu[p] = v;
        neg_complete_ll(spec, &mu, &theta.sigma, subjects, etas, n_chains, psi)
    })
}

fn newton_combined_sigma(
    spec: &ModelSpec,
    theta: &PopulationParams,
    subjects: &[SubjectRef],
    etas: &[&[f64]],
    n_chains: usize,
    psi: &mut [f64],
) -> [f64; 2] {
    let mut sigma = theta.sigma.clone();
    for c in 0..2 {
        // optimize on the log scale so the coefficient stays positive
        let start = sigma[c].max(1e-8).ln();
        let best = newton_1d(start, 0.0, 0.5, 3, |lv| {
            let mut s = sigma.clone();
            s[c] = lv.exp();
            neg_complete_ll(spec, &theta.mu, &s, subjects, etas, n_chains, psi)
        });
        sigma[c] = best.exp();
    }
    [sigma[0], sigma[1]]
}
