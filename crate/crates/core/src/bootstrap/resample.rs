//! Generation of bootstrap datasets.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{draw_mvn, Dataset, Design, ModelSpec, PopulationParams, SubjectDesign};
use crate::saem::ConditionalDraws;

/// How subjects are grouped for stratified case resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strata {
    /// The subjects' `group` labels.
    Group,
    /// Subjects with bit-identical dose vectors.
    DesignPattern,
}

/// Resample whole subjects with replacement. With `stratify_by`, each
/// stratum is resampled separately and keeps its size. Resampled subjects
/// get fresh ids `"<slot>:<donor id>"`.
pub fn resample_case<R: Rng + ?Sized>(dataset: &Dataset, stratify_by: Option<Strata>, rng: &mut R) -> Result<Dataset> {
    let n = dataset.n_subjects();
    if n == 0 {
        return invalid("cannot resample an empty dataset");
    }
    let mut keys = Vec::with_capacity(n);
    for s in &dataset.design.subjects {
        keys.push(match stratify_by {
            None => String::new(),
            Some(Strata::Group) => match &s.group {
                Some(g) => g.clone(),
                None => return invalid(format!("subject {} has no group label to stratify on", s.id)),
            },
            Some(Strata::DesignPattern) => s.doses.iter().map(|d| format!("{:x}", d.to_bits())).collect::<Vec<_>>().join(","),
        });
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k).or_default().push(i);
    }
    let mut subjects = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    // each original slot is refilled from its own stratum
    for slot in 0..n {
        let members = &strata[keys[slot].as_str()];
        let donor = members[rng.random_range(0..members.len())];
        let d = &dataset.design.subjects[donor];
        subjects.push(SubjectDesign { id: format!("{}:{}", slot + 1, d.id), group: d.group.clone(), doses: d.doses.clone() });
        observations.push(dataset.observations[donor].clone());
    }
    Ok(Dataset { design: Design { subjects }, observations, provenance: None })
}

fn assemble<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &PopulationParams,
    design: &Design,
    etas: &[Vec<f64>],
    mut residual: impl FnMut(usize, usize, &mut R) -> f64,
    rng: &mut R,
) -> Dataset {
    let mut psi = vec![0.0; spec.n_params()];
    let observations = design
        .subjects
        .iter()
        .zip(etas)
        .enumerate()
        .map(|(i, (s, eta))| {
            spec.individual(&theta.mu, eta, &mut psi);
            s.doses
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let f = spec.structural.eval(&psi, x);
                    f + spec.error_model.sd(&theta.sigma, f) * residual(i, j, rng)
                })
                .collect()
        })
        .collect();
    Dataset { design: design.clone(), observations, provenance: None }
}

/// Parametric residual bootstrap: `η* ~ N(0, Ω̂)`, `ε* ~ N(0, 1)`. A
/// non-PSD `Ω̂` is projected to the nearest PSD matrix first.
pub fn resample_parametric<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta_hat: &PopulationParams,
    design: &Design,
    rng: &mut R,
) -> Result<Dataset> {
    let mut theta = theta_hat.clone();
    if !linalg::is_psd(&theta.omega) {
        warn!("estimated omega is not PSD; clipping negative eigenvalues");
        theta.omega = linalg::project_psd(&theta.omega);
    }
    let factor = linalg::psd_factor(&theta.omega);
    let q = spec.n_random();
    let etas: Vec<Vec<f64>> = design.subjects.iter().map(|_| draw_mvn(&factor, q, rng)).collect();
    Ok(assemble(spec, &theta, design, &etas, |_, _, r: &mut R| r.sample(StandardNormal), rng))
}

/// Which matrix square-root convention the random-effect correction uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionVariant {
    /// `A = S^{-1/2} Ω̂^{1/2}` with symmetric roots from both EVDs, so that
    /// `Aᵀ S A = Ω̂`.
    #[default]
    CovarianceMatching,
    /// `A = V_S D_S^{-1/2} V_Ω D_Ω^{-1/2}` exactly as commonly printed; does
    /// not reproduce `Ω̂`. Kept for comparison only.
    Literal,
}

/// Center EBEs and rescale them so their sample covariance (divisor n − 1)
/// equals `omega_hat`. Rows are subjects. If the empirical covariance is
/// singular, falls back to per-component variance scaling.
pub fn correct_random_effects_evd(ebe: &[Vec<f64>], omega_hat: &DMatrix<f64>, variant: CorrectionVariant) -> Result<Vec<Vec<f64>>> {
    let n = ebe.len();
    if n < 2 {
        return invalid("random-effect correction needs at least two subjects");
    }
    let q = omega_hat.nrows();
    if ebe.iter().any(|e| e.len() != q) {
        return invalid("EBE dimension does not match omega");
    }
    let mean: Vec<f64> = (0..q).map(|d| ebe.iter().map(|e| e[d]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = ebe.iter().map(|e| e.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    if q == 0 {
        return Ok(centered);
    }
    let s = linalg::sample_covariance(&centered);
    let es = nalgebra::SymmetricEigen::new(s.clone());
    let smax = es.eigenvalues.max();
    let singular = !(smax > 0.0) || es.eigenvalues.iter().any(|&l| l <= 1e-12 * smax);

    let a = if singular {
        warn!("EBE covariance is singular; scaling each component by its variance ratio");
        DMatrix::from_fn(q, q, |i, j| if i == j && s[(i, i)] > 0.0 { (omega_hat[(i, i)].max(0.0) / s[(i, i)]).sqrt() } else { 0.0 })
    } else {
        match variant {
            CorrectionVariant::CovarianceMatching => {
                let s_inv_half = linalg::map_eigenvalues(&s, |l| 1.0 / l.sqrt());
                s_inv_half * linalg::sqrt_psd(omega_hat)
            }
            CorrectionVariant::Literal => {
                let eo = nalgebra::SymmetricEigen::new(omega_hat.clone());
                let ds = DMatrix::from_diagonal(&es.eigenvalues.map(|l| 1.0 / l.sqrt()));
                let dq = DMatrix::from_diagonal(&eo.eigenvalues.map(|l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 }));
                &es.eigenvectors * ds * &eo.eigenvectors * dq
            }
        }
    };
    // row vector times A
    Ok(centered.iter().map(|e| (0..q).map(|c| (0..q).map(|r| e[r] * a[(r, c)]).sum()).collect()).collect())
}

/// Center residuals and scale them to unit sample SD (divisor n − 1).
pub fn correct_residuals(residuals: &[f64]) -> Result<Vec<f64>> {
    let n = residuals.len();
    if n < 2 {
        return invalid("residual correction needs at least two residuals");
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = residuals.iter().map(|r| r - mean).collect();
    let sd = (centered.iter().map(|c| c * c).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return invalid("residuals have zero empirical spread");
    }
    Ok(centered.iter().map(|c| c / sd).collect())
}

/// Standardized residuals `(y − f(x, μ̂, η̂_i)) / g` at given random effects.
pub fn standardized_residuals(spec: &ModelSpec, theta_hat: &PopulationParams, dataset: &Dataset, etas: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut psi = vec![0.0; spec.n_params()];
    dataset
        .design
        .subjects
        .iter()
        .zip(&dataset.observations)
        .zip(etas)
        .map(|((s, y), eta)| {
            spec.individual(&theta_hat.mu, eta, &mut psi);
            s.doses
                .iter()
                .zip(y)
                .map(|(&x, &v)| {
                    let f = spec.structural.eval(&psi, x);
                    (v - f) / spec.error_model.sd(&theta_hat.sigma, f)
                })
                .collect()
        })
        .collect()
}

/// Pools for the non-parametric residual bootstrap, built once per fit.
#[derive(Clone, Debug)]
pub struct NpPools {
    pub eta: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
}

impl NpPools {
    /// Corrected EBE and residual pools. `residuals` are the standardized
    /// residuals at the EBEs, one vector per subject.
    pub fn new(ebe: &[Vec<f64>], residuals: &[Vec<f64>], omega_hat: &DMatrix<f64>, variant: CorrectionVariant) -> Result<Self> {
        let eta = correct_random_effects_evd(ebe, omega_hat, variant)?;
        let flat: Vec<f64> = residuals.iter().flatten().copied().collect();
        // noise-free data: nothing to rescale, every residual is zero
        let residuals = if flat.iter().all(|&r| r == 0.0) { flat } else { correct_residuals(&flat)? };
        Ok(NpPools { eta, residuals })
    }
}

/// Non-parametric residual bootstrap from corrected EBE and residual pools.
pub fn resample_nonparametric<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta_hat: &PopulationParams,
    pools: &NpPools,
    design: &Design,
    rng: &mut R,
) -> Result<Dataset> {
    if pools.eta.is_empty() || pools.residuals.is_empty() {
        return invalid("empty resampling pool");
    }
    let etas: Vec<Vec<f64>> = design.subjects.iter().map(|_| pools.eta[rng.random_range(0..pools.eta.len())].clone()).collect();
    let pool = &pools.residuals;
    Ok(assemble(spec, theta_hat, design, &etas, |_, _, r: &mut R| pool[r.random_range(0..pool.len())], rng))
}

/// Residual pooling for the conditional bootstrap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPool {
    /// Residuals of each subject slot are drawn from that subject's own
    /// `M × n_i` conditional residuals.
    #[default]
    PerSubject,
    /// One pool over all subjects.
    Global,
}

/// Random-effect draw for the conditional bootstrap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaDraw {
    /// Pick a donor subject uniformly, then one of its `M` draws.
    #[default]
    SubjectThenSample,
    /// Pick uniformly among all `N·M` draws.
    PooledFlat,
}

/// Centered pools for the conditional bootstrap, built once per fit.
#[derive(Clone, Debug)]
pub struct CnpPools {
    /// Per subject, `M` centered random-effect vectors.
    pub eta: Vec<Vec<Vec<f64>>>,
    /// Per subject (or a single global entry), centered residuals.
    pub residuals: Vec<Vec<f64>>,
    pub residual_pool: ResidualPool,
}

impl CnpPools {
    /// Random effects are centered by the grand mean over all subjects and
    /// draws; residuals are centered within each pool. No variance
    /// correction is applied.
    pub fn new(conditional: &ConditionalDraws, residual_pool: ResidualPool) -> Result<Self> {
        let n = conditional.subjects.len();
        if n == 0 || conditional.m == 0 {
            return invalid("conditional draws are empty");
        }
        let q = conditional.subjects[0].eta.first().map_or(0, Vec::len);
        let total = conditional.subjects.iter().map(|s| s.eta.len()).sum::<usize>() as f64;
        let grand: Vec<f64> =
            (0..q).map(|d| conditional.subjects.iter().flat_map(|s| s.eta.iter().map(move |e| e[d])).sum::<f64>() / total).collect();
        let eta = conditional
            .subjects
            .iter()
            .map(|s| s.eta.iter().map(|e| e.iter().zip(&grand).map(|(v, g)| v - g).collect()).collect())
            .collect();
        let center = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
        };
        let residuals = match residual_pool {
            ResidualPool::PerSubject => {
                let mut out = Vec::with_capacity(n);
                for s in &conditional.subjects {
                    let flat: Vec<f64> = s.residuals.iter().flatten().copied().collect();
                    if flat.len() < 2 {
                        return Err(Error::InvalidConfig(format!(
                            "subject {}: per-subject residual pool has {} value(s); increase M",
                            s.id,
                            flat.len()
                        )));
                    }
                    out.push(center(flat));
                }
                out
            }
            ResidualPool::Global => {
                let flat: Vec<f64> = conditional.subjects.iter().flat_map(|s| s.residuals.iter().flatten().copied()).collect();
                if flat.len() < 2 {
                    return Err(Error::InvalidConfig("global residual pool has fewer than two values".into()));
                }
                vec![center(flat)]
            }
        };
        Ok(CnpPools { eta, residuals, residual_pool })
    }
}

/// Conditional non-parametric bootstrap: random effects and residuals are
/// resampled from centered conditional draws. The design is kept as is.
pub fn resample_conditional_np<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta_hat: &PopulationParams,
    pools: &CnpPools,
    design: &Design,
    eta_draw: EtaDraw,
    rng: &mut R,
) -> Result<Dataset> {
    let n = pools.eta.len();
    if pools.residual_pool == ResidualPool::PerSubject && n != design.n_subjects() {
        return invalid("per-subject residual pools must match the design's subjects");
    }
    let total: usize = pools.eta.iter().map(Vec::len).sum();
    let etas: Vec<Vec<f64>> = (0..design.n_subjects())
        .map(|_| match eta_draw {
            EtaDraw::SubjectThenSample => {
                let donor = &pools.eta[rng.random_range(0..n)];
                donor[rng.random_range(0..donor.len())].clone()
            }
            EtaDraw::PooledFlat => {
                let mut k = rng.random_range(0..total);
                let mut i = 0;
                while k >= pools.eta[i].len() {
                    k -= pools.eta[i].len();
                    i += 1;
                }
                pools.eta[i][k].clone()
            }
        })
        .collect();
    let residuals = &pools.residuals;
    Ok(assemble(
        spec,
        theta_hat,
        design,
        &etas,
        |i, _, r: &mut R| {
            let pool = match pools.residual_pool {
                ResidualPool::PerSubject => &residuals[i],
                ResidualPool::Global => &residuals[0],
            };
            pool[r.random_range(0..pool.len())]
        },
        rng,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn residual_correction_examples() {
        let out = correct_residuals(&[1.0, 3.0]).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((out[0] + h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);
        assert!(correct_residuals(&[2.0, 2.0, 2.0]).is_err());
        assert!(correct_residuals(&[2.0]).is_err());
    }

    #[test]
    fn residual_correction_fixed_point() {
        let x = [-1.0, 0.0, 1.0];
        let out = correct_residuals(&x).unwrap();
        for (a, b) in out.iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn evd_correction_scalar() {
        let ebe: Vec<Vec<f64>> = [0.1, -0.2, 0.4, 0.0, 0.3].iter().map(|&v| vec![v]).collect();
        let s = linalg::sample_covariance(&ebe)[(0, 0)];
        let omega = DMatrix::from_element(1, 1, 0.49);
        let out = correct_random_effects_evd(&ebe, &omega, CorrectionVariant::CovarianceMatching).unwrap();
        let mean = ebe.iter().map(|e| e[0]).sum::<f64>() / 5.0;
        for (o, e) in out.iter().zip(&ebe) {
            assert!((o[0] - (e[0] - mean) * (0.7 / s.sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn evd_correction_identity_target() {
        // S = 4I, Ω̂ = I
        let ebe = vec![vec![2.0, 2.0], vec![-2.0, 2.0], vec![2.0, -2.0], vec![-2.0, -2.0]];
        let s = linalg::sample_covariance(&ebe);
        let ebe: Vec<Vec<f64>> = ebe.iter().map(|e| e.iter().map(|v| v * (4.0 / s[(0, 0)]).sqrt()).collect()).collect();
        let omega = DMatrix::identity(2, 2);
        let out = correct_random_effects_evd(&ebe, &omega, CorrectionVariant::CovarianceMatching).unwrap();
        assert!(linalg::frobenius_rel(&linalg::sample_covariance(&out), &omega) < 1e-10);
    }

    #[test]
    fn evd_correction_singular_falls_back() {
        let ebe = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let omega = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let out = correct_random_effects_evd(&ebe, &omega, CorrectionVariant::CovarianceMatching).unwrap();
        let c = linalg::sample_covariance(&out);
        assert!((c[(0, 0)] - 0.5).abs() < 1e-12 && (c[(1, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn case_resampling_keeps_size_and_strata() {
        let mut subjects = Design::group("a", 3, &[0.0, 10.0], 1);
        subjects.extend(Design::group("b", 5, &[5.0], 4));
        let design = Design { subjects };
        let observations = design.subjects.iter().map(|s| vec![1.0; s.doses.len()]).collect();
        let ds = Dataset { design, observations, provenance: None };
        for strata in [Some(Strata::Group), Some(Strata::DesignPattern)] {
            let mut r = rng::stream(4, &[]);
            let out = resample_case(&ds, strata, &mut r).unwrap();
            assert_eq!(out.n_subjects(), 8);
            assert_eq!(out.design.subjects.iter().filter(|s| s.doses.len() == 2).count(), 3);
            out.validate().unwrap();
        }
        let same_a = resample_case(&ds, None, &mut rng::stream(9, &[])).unwrap();
        let same_b = resample_case(&ds, None, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(same_a, same_b);
    }

    #[test]
    fn stratifying_on_missing_labels_fails() {
        let design = Design { subjects: vec![SubjectDesign { id: "1".into(), group: None, doses: vec![0.0] }] };
        let ds = Dataset { design, observations: vec![vec![1.0]], provenance: None };
        assert!(resample_case(&ds, Some(Strata::Group), &mut rng::stream(1, &[])).is_err());
    }
}
