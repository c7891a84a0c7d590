//! Metropolis–Hastings kernels targeting `p(η_i | y_i; θ)`.
//!
//! One sweep applies, in order:
//! 1. independent proposals drawn from the population prior `N(0, Ω)`,
//! 2. a joint Gaussian random walk on all components,
//! 3. a componentwise Gaussian random walk.
//!
//! Random-walk scales are adapted multiplicatively toward a target
//! acceptance rate.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{ErrorModel, ModelSpec};

/// Proposal configuration shared by the SAEM E-step and the conditional sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhSettings {
    /// Repetitions per sweep of the prior, joint and componentwise kernels.
    pub repetitions: [usize; 3],
    /// Initial random-walk scale as a multiple of `sqrt(Ω_dd)`.
    pub initial_scale: f64,
    pub target_acceptance: f64,
    /// Step of the multiplicative scale update `s *= 1 + rate·(acc − target)`.
    pub adaptation_rate: f64,
}

impl Default for MhSettings {
    fn default() -> Self {
        MhSettings { repetitions: [2, 2, 2], initial_scale: 0.5, target_acceptance: 0.4, adaptation_rate: 0.4 }
    }
}

impl MhSettings {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(crate::Error::InvalidConfig("target acceptance must lie in (0, 1)".into()));
        }
        if self.repetitions.iter().all(|&r| r == 0) {
            return Err(crate::Error::InvalidConfig("at least one MH kernel must run".into()));
        }
        if !(self.initial_scale > 0.0) || !(self.adaptation_rate >= 0.0) {
            return Err(crate::Error::InvalidConfig("MH scales must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to evaluate the conditional density at fixed θ.
pub(crate) struct Target<'a> {
    pub spec: &'a ModelSpec,
    pub mu: &'a [f64],
    pub sigma: &'a [f64],
    /// `L` with `L Lᵀ = Ω`.
    pub factor: DMatrix<f64>,
    /// `Ω⁻¹`, row-major.
    pub precision: Vec<f64>,
    pub q: usize,
}

impl<'a> Target<'a> {
    pub fn new(spec: &'a ModelSpec, mu: &'a [f64], omega: &DMatrix<f64>, sigma: &'a [f64]) -> Self {
        let q = omega.nrows();
        let factor = crate::linalg::psd_factor(omega);
        let inv = omega
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| crate::linalg::map_eigenvalues(omega, |l| if l > 1e-300 { 1.0 / l } else { 0.0 }));
        let precision = inv.transpose().as_slice().to_vec();
        Target { spec, mu, sigma, factor, precision, q }
    }

    /// `log p(y_i | η)` up to a constant.
    #[inline]
    pub fn log_lik(&self, eta: &[f64], doses: &[f64], y: &[f64], psi: &mut [f64]) -> f64 {
        self.spec.individual(self.mu, eta, psi);
        let f_model = self.spec.structural;
        let ll = match self.spec.error_model {
            ErrorModel::Constant => {
                let s = self.sigma[0];
                let ss: f64 = doses
                    .iter()
                    .zip(y)
                    .map(|(&x, &v)| {
                        let r = v - f_model.eval(psi, x);
                        r * r
                    })
                    .sum();
                -0.5 * ss / (s * s) - doses.len() as f64 * s.ln()
            }
            ErrorModel::Proportional => {
                let s = self.sigma[0];
                let mut ss = 0.0;
                let mut prod = 1.0;
                for (&x, &v) in doses.iter().zip(y) {
                    let fv = f_model.eval(psi, x);
                    let r = (v - fv) / fv.abs();
                    ss += r * r;
                    prod *= fv.abs();
                }
                -0.5 * ss / (s * s) - prod.ln() - doses.len() as f64 * s.ln()
            }
            ErrorModel::Combined => doses
                .iter()
                .zip(y)
                .map(|(&x, &v)| {
                    let f = f_model.eval(psi, x);
                    let g = self.sigma[0] + self.sigma[1] * f.abs();
                    let r = (v - f) / g;
                    -0.5 * r * r - g.ln()
                })
                .sum(),
        };
        if ll.is_nan() {
            f64::NEG_INFINITY
        } else {
            ll
        }
    }

    /// `log N(η; 0, Ω)` up to a constant.
    #[inline]
    pub fn log_prior(&self, eta: &[f64]) -> f64 {
        let q = self.q;
        let mut acc = 0.0;
        for a in 0..q {
            let row = &self.precision[a * q..(a + 1) * q];
            let mut s = 0.0;
            for b in 0..q {
                s += row[b] * eta[b];
            }
            acc += eta[a] * s;
        }
        -0.5 * acc
    }

    pub fn draw_prior<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..self.q {
            out[a] = (0..self.q).map(|b| self.factor[(a, b)] * z[b]).sum();
        }
    }
}

/// State of one Markov chain for one subject.
#[derive(Clone, Debug)]
pub(crate) struct Chain {
    pub eta: Vec<f64>,
    pub log_lik: f64,
}

/// Accept/propose counters for the three kernels.
#[derive(Clone, Debug, Default)]
pub(crate) struct Counts {
    pub prior: [u64; 2],
    pub joint: [u64; 2],
    pub comp: Vec<[u64; 2]>,
}

impl Counts {
    pub fn new(q: usize) -> Self {
        Counts { prior: [0; 2], joint: [0; 2], comp: vec![[0; 2]; q] }
    }

    pub fn accepted(&self) -> u64 {
        self.prior[0] + self.joint[0] + self.comp.iter().map(|c| c[0]).sum::<u64>()
    }

    pub fn proposed(&self) -> u64 {
        self.prior[1] + self.joint[1] + self.comp.iter().map(|c| c[1]).sum::<u64>()
    }

    /// Acceptance rates of the prior, joint and componentwise kernels.
    pub fn rates(&self) -> [f64; 3] {
        let r = |c: [u64; 2]| if c[1] == 0 { f64::NAN } else { c[0] as f64 / c[1] as f64 };
        let comp = self.comp.iter().fold([0u64; 2], |acc, c| [acc[0] + c[0], acc[1] + c[1]]);
        [r(self.prior), r(self.joint), r(comp)]
    }
}

/// Random-walk proposal standard deviations.
#[derive(Clone, Debug)]
pub(crate) struct Scales {
    pub joint: Vec<f64>,
    pub comp: Vec<f64>,
}

impl Scales {
    pub fn new(omega: &DMatrix<f64>, settings: &MhSettings) -> Self {
        let s: Vec<f64> = (0..omega.nrows()).map(|d| settings.initial_scale * omega[(d, d)].max(1e-12).sqrt()).collect();
        Scales { joint: s.clone(), comp: s }
    }

    pub fn adapt(&mut self, counts: &Counts, settings: &MhSettings) {
        let upd = |s: &mut f64, c: [u64; 2]| {
            if c[1] > 0 {
                let rate = c[0] as f64 / c[1] as f64;
                *s *= 1.0 + settings.adaptation_rate * (rate - settings.target_acceptance);
                *s = s.max(1e-300);
            }
        };
        for s in self.joint.iter_mut() {
            upd(s, counts.joint);
        }
        for (s, &c) in self.comp.iter_mut().zip(&counts.comp) {
            upd(s, c);
        }
    }
}

/// Scratch buffers reused across sweeps.
pub(crate) struct Scratch {
    pub psi: Vec<f64>,
    pub prop: Vec<f64>,
    pub z: Vec<f64>,
}

impl Scratch {
    pub fn new(n_params: usize, q: usize) -> Self {
        Scratch { psi: vec![0.0; n_params], prop: vec![0.0; q], z: vec![0.0; q] }
    }
}

/// One full sweep of the three kernels on `chain`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sweep<R: Rng + ?Sized>(
    target: &Target,
    doses: &[f64],
    y: &[f64],
    chain: &mut Chain,
    scales: &Scales,
    settings: &MhSettings,
    counts: &mut Counts,
    scratch: &mut Scratch,
    rng: &mut R,
) {
    let q = target.q;
    if q == 0 {
        return;
    }
    let Scratch { psi, prop, z } = scratch;

    for _ in 0..settings.repetitions[0] {
        target.draw_prior(rng, z, prop);
        let ll = target.log_lik(prop, doses, y, psi);
        counts.prior[1] += 1;
        let u: f64 = rng.random();
        if u.ln() < ll - chain.log_lik {
            chain.eta.copy_from_slice(prop);
            chain.log_lik = ll;
            counts.prior[0] += 1;
        }
    }

    let mut lp = target.log_prior(&chain.eta);
    for _ in 0..settings.repetitions[1] {
        for d in 0..q {
            let e: f64 = rng.sample(StandardNormal);
            prop[d] = chain.eta[d] + scales.joint[d] * e;
        }
        let ll = target.log_lik(prop, doses, y, psi);
        let lp_new = target.log_prior(prop);
        counts.joint[1] += 1;
        let u: f64 = rng.random();
        if u.ln() < ll + lp_new - chain.log_lik - lp {
            chain.eta.copy_from_slice(prop);
            chain.log_lik = ll;
            lp = lp_new;
            counts.joint[0] += 1;
        }
    }

    for _ in 0..settings.repetitions[2] {
        for d in 0..q {
            prop.copy_from_slice(&chain.eta);
            let e: f64 = rng.sample(StandardNormal);
            prop[d] += scales.comp[d] * e;
            let ll = target.log_lik(prop, doses, y, psi);
            let lp_new = target.log_prior(prop);
            counts.comp[d][1] += 1;
            let u: f64 = rng.random();
            if u.ln() < ll + lp_new - chain.log_lik - lp {
                chain.eta.copy_from_slice(prop);
                chain.log_lik = ll;
                lp = lp_new;
                counts.comp[d][0] += 1;
            }
        }
    }
}
