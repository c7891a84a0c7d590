//! Model definitions, designs, datasets and data simulation.
//!
//! Observations follow
//!
//! ```text
//! y_ij = f(x_ij, ψ_i) + g(f, σ) · ε_ij,     ε_ij ~ N(0, 1)
//! ψ_i  = h(μ, η_i),                         η_i  ~ N(0, Ω)
//! ```
//!
//! where `h` is applied parameter by parameter according to its
//! [`Transform`]. Only parameters whose diagonal entry in the
//! [`OmegaPattern`] is set carry a random effect; the random-effect vector
//! `η_i` has one entry per such parameter, in parameter order.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::{self, tag};

/// Structural model `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structural {
    /// Sigmoid Emax: `E0 + Emax·x^γ / (x^γ + ED50^γ)`, parameters
    /// `[E0, Emax, ED50, gamma]`.
    SigEmax,
    /// Constant level `f = ψ₀`, one parameter. Used for the random-intercept
    /// model, which has closed-form answers.
    Intercept,
}

impl Structural {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Structural::SigEmax => &["E0", "Emax", "ED50", "gamma"],
            Structural::Intercept => &["level"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    /// Unchecked evaluation used in the inner loops.
    #[inline]
    pub fn eval(self, psi: &[f64], x: f64) -> f64 {
        match self {
            Structural::SigEmax => {
                let (e0, emax, ed50, gamma) = (psi[0], psi[1], psi[2], psi[3]);
                if x == 0.0 {
                    return e0;
                }
                if gamma == 1.0 {
                    e0 + emax * x / (x + ed50)
                } else {
                    // x^γ / (x^γ + ED50^γ) = 1 / (1 + (ED50/x)^γ), avoids overflow
                    e0 + emax / (1.0 + (ed50 / x).powf(gamma))
                }
            }
            Structural::Intercept => psi[0],
        }
    }
}

/// Evaluate the structural model with input validation.
pub fn evaluate_structural(structural: Structural, psi: &[f64], x: f64) -> Result<f64> {
    if psi.len() != structural.n_params() {
        return invalid(format!("expected {} structural parameters, got {}", structural.n_params(), psi.len()));
    }
    if !x.is_finite() || psi.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite structural input");
    }
    if x < 0.0 {
        return invalid(format!("dose must be >= 0, got {x}"));
    }
    if structural == Structural::SigEmax && (psi[2] <= 0.0 || psi[3] <= 0.0) {
        return invalid("ED50 and gamma must be positive");
    }
    let f = structural.eval(psi, x);
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NumericFailure(format!("f({x}) is not finite")))
    }
}

/// Residual error model `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorModel {
    /// `g = σ`
    Constant,
    /// `g = σ·|f|`
    Proportional,
    /// `g = σ_a + σ_b·|f|`
    Combined,
}

impl ErrorModel {
    pub fn coefficient_names(self) -> &'static [&'static str] {
        match self {
            ErrorModel::Constant | ErrorModel::Proportional => &["sigma"],
            ErrorModel::Combined => &["sigma_a", "sigma_b"],
        }
    }

    pub fn n_coefficients(self) -> usize {
        self.coefficient_names().len()
    }

    #[inline]
    pub fn sd(self, sigma: &[f64], f: f64) -> f64 {
        match self {
            ErrorModel::Constant => sigma[0],
            ErrorModel::Proportional => sigma[0] * f.abs(),
            ErrorModel::Combined => sigma[0] + sigma[1] * f.abs(),
        }
    }
}

/// Residual standard deviation for a predicted value `f`.
pub fn evaluate_error_sd(error_model: ErrorModel, sigma: &[f64], f: f64) -> Result<f64> {
    if sigma.len() != error_model.n_coefficients() {
        return invalid(format!("error model needs {} coefficient(s), got {}", error_model.n_coefficients(), sigma.len()));
    }
    if sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return invalid("residual error coefficients must be finite and >= 0");
    }
    if !f.is_finite() {
        return invalid("non-finite prediction");
    }
    Ok(error_model.sd(sigma, f))
}

/// Per-parameter transformation between the natural scale and the Gaussian
/// scale on which random effects act.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// ψ = μ + η
    Normal,
    /// ψ = μ·exp(η)
    LogNormal,
    /// ψ = μ for every subject.
    Fixed,
}

impl Transform {
    /// Natural value to Gaussian scale.
    #[inline]
    pub fn to_gaussian(self, v: f64) -> f64 {
        match self {
            Transform::LogNormal => v.ln(),
            Transform::Normal | Transform::Fixed => v,
        }
    }

    #[inline]
    pub fn from_gaussian(self, v: f64) -> f64 {
        match self {
            Transform::LogNormal => v.exp(),
            Transform::Normal | Transform::Fixed => v,
        }
    }

    /// d(natural)/d(gaussian) at natural value `v`.
    #[inline]
    pub fn jacobian(self, v: f64) -> f64 {
        match self {
            Transform::LogNormal => v,
            Transform::Normal | Transform::Fixed => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub transform: Transform,
    /// Whether the population value is estimated or held at its initial value.
    pub estimated: bool,
}

/// Symmetric mask over parameters marking estimated variances (diagonal)
/// and covariances (off-diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<bool>>", try_from = "Vec<Vec<bool>>")]
pub struct OmegaPattern {
    n: usize,
    mask: Vec<bool>,
}

impl OmegaPattern {
    pub fn empty(n: usize) -> Self {
        OmegaPattern { n, mask: vec![false; n * n] }
    }

    pub fn diagonal(flags: &[bool]) -> Self {
        let mut p = Self::empty(flags.len());
        for (i, &f) in flags.iter().enumerate() {
            p.set(i, i, f);
        }
        p
    }

    pub fn with(mut self, i: usize, j: usize, on: bool) -> Self {
        self.set(i, j, on);
        self
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.mask[i * self.n + j] = on;
        self.mask[j * self.n + i] = on;
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn size(&self) -> usize {
        self.n
    }
}

impl From<OmegaPattern> for Vec<Vec<bool>> {
    fn from(p: OmegaPattern) -> Self {
        p.mask.chunks(p.n.max(1)).take(p.n).map(<[bool]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<bool>>> for OmegaPattern {
    type Error = String;
    fn try_from(rows: Vec<Vec<bool>>) -> std::result::Result<Self, String> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err("omega pattern must be square".into());
        }
        let mask: Vec<bool> = rows.into_iter().flatten().collect();
        let p = OmegaPattern { n, mask };
        for i in 0..n {
            for j in 0..i {
                if p.get(i, j) != p.get(j, i) {
                    return Err("omega pattern must be symmetric".into());
                }
            }
        }
        Ok(p)
    }
}

/// Full model description: `f`, `g`, the per-parameter transforms and the
/// variability structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub structural: Structural,
    pub error_model: ErrorModel,
    pub params: Vec<ParamSpec>,
    pub omega_pattern: OmegaPattern,
}

impl ModelSpec {
    /// Sigmoid Emax model with log-normal E0, Emax, ED50, a covariance between
    /// Emax and ED50, no variability on γ and a proportional error. When
    /// `estimate_gamma` is false γ stays at its initial value (the plain
    /// Emax model uses γ = 1).
    pub fn sig_emax(estimate_gamma: bool) -> Self {
        let names = Structural::SigEmax.param_names();
        let transforms = [Transform::LogNormal, Transform::LogNormal, Transform::LogNormal, Transform::Fixed];
        let params = names
            .iter()
            .zip(transforms)
            .enumerate()
            .map(|(i, (n, t))| ParamSpec { name: (*n).to_string(), transform: t, estimated: i < 3 || estimate_gamma })
            .collect();
        ModelSpec {
            structural: Structural::SigEmax,
            error_model: ErrorModel::Proportional,
            params,
            omega_pattern: OmegaPattern::diagonal(&[true, true, true, false]).with(1, 2, true),
        }
    }

    /// `y_ij = μ + η_i + g·ε_ij` with a Normal random intercept.
    pub fn random_intercept(error_model: ErrorModel) -> Self {
        ModelSpec {
            structural: Structural::Intercept,
            error_model,
            params: vec![ParamSpec { name: "level".into(), transform: Transform::Normal, estimated: true }],
            omega_pattern: OmegaPattern::diagonal(&[true]),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_params();
        if n != self.structural.n_params() {
            return invalid(format!("structural model has {} parameters, spec lists {n}", self.structural.n_params()));
        }
        if self.omega_pattern.size() != n {
            return invalid("omega pattern size does not match parameter count");
        }
        for (i, p) in self.params.iter().enumerate() {
            if p.transform == Transform::Fixed && self.omega_pattern.get(i, i) {
                return invalid(format!("parameter {} has a Fixed transform but a variance", p.name));
            }
            for j in 0..n {
                if i != j && self.omega_pattern.get(i, j) && !(self.omega_pattern.get(i, i) && self.omega_pattern.get(j, j)) {
                    return invalid(format!("covariance ({}, {}) needs both variances estimated", p.name, self.params[j].name));
                }
            }
        }
        Ok(())
    }

    /// Parameter indices that carry a random effect, in order.
    pub fn random_indices(&self) -> Vec<usize> {
        (0..self.n_params()).filter(|&i| self.omega_pattern.get(i, i)).collect()
    }

    pub fn n_random(&self) -> usize {
        self.random_indices().len()
    }

    /// Estimated covariances as pairs `(a, b)`, `a < b`, of random-effect dimensions.
    pub fn covariance_pairs(&self) -> Vec<(usize, usize)> {
        let r = self.random_indices();
        let mut out = Vec::new();
        for a in 0..r.len() {
            for b in a + 1..r.len() {
                if self.omega_pattern.get(r[a], r[b]) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Estimated population parameters that carry no random effect.
    pub fn non_random_estimated(&self) -> Vec<usize> {
        (0..self.n_params()).filter(|&i| self.params[i].estimated && !self.omega_pattern.get(i, i)).collect()
    }

    pub fn estimated_fixed(&self) -> Vec<usize> {
        (0..self.n_params()).filter(|&i| self.params[i].estimated).collect()
    }

    /// Names of the reported parameter vector, see [`PopulationParams::to_vector`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.estimated_fixed().iter().map(|&i| self.params[i].name.clone()).collect();
        let r = self.random_indices();
        names.extend(r.iter().map(|&i| format!("omega2_{}", self.params[i].name)));
        names.extend(self.covariance_pairs().iter().map(|&(a, b)| format!("cov_{}_{}", self.params[r[a]].name, self.params[r[b]].name)));
        names.extend(self.error_model.coefficient_names().iter().map(|s| (*s).to_string()));
        names
    }

    /// Number of leading fixed-effect entries in the reported vector.
    pub fn n_fixed_reported(&self) -> usize {
        self.estimated_fixed().len()
    }

    /// Individual parameters `ψ` for natural-scale population values `mu`
    /// and random effects `eta` (one entry per random dimension).
    #[inline]
    pub fn individual(&self, mu: &[f64], eta: &[f64], out: &mut [f64]) {
        let mut r = 0;
        for (i, p) in self.params.iter().enumerate() {
            if self.omega_pattern.get(i, i) {
                out[i] = apply_transform(p.transform, mu[i], eta[r]);
                r += 1;
            } else {
                out[i] = mu[i];
            }
        }
    }
}

#[inline]
fn apply_transform(t: Transform, mu: f64, eta: f64) -> f64 {
    match t {
        Transform::LogNormal => mu * eta.exp(),
        Transform::Normal => mu + eta,
        Transform::Fixed => mu,
    }
}

/// Map population values and random effects to individual parameters.
pub fn transform_psi(spec: &ModelSpec, mu: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != spec.n_params() {
        return invalid(format!("expected {} fixed effects, got {}", spec.n_params(), mu.len()));
    }
    if eta.len() != spec.n_random() {
        return invalid(format!("expected {} random effects, got {}", spec.n_random(), eta.len()));
    }
    let mut out = vec![0.0; mu.len()];
    spec.individual(mu, eta, &mut out);
    Ok(out)
}

/// Population parameters θ = (μ, Ω, σ). `mu` is on the natural scale and
/// covers every structural parameter; `omega` is indexed by random-effect
/// dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", from = "ParamsRepr")]
pub struct PopulationParams {
    pub mu: Vec<f64>,
    pub omega: DMatrix<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    mu: Vec<f64>,
    omega: Vec<Vec<f64>>,
    sigma: Vec<f64>,
}

impl From<PopulationParams> for ParamsRepr {
    fn from(p: PopulationParams) -> Self {
        let omega = p.omega.row_iter().map(|r| r.iter().copied().collect()).collect();
        ParamsRepr { mu: p.mu, omega, sigma: p.sigma }
    }
}

impl From<ParamsRepr> for PopulationParams {
    fn from(r: ParamsRepr) -> Self {
        let q = r.omega.len();
        let flat: Vec<f64> = r.omega.into_iter().flatten().collect();
        let omega = if flat.len() == q * q {
            DMatrix::from_row_slice(q, q, &flat)
        } else {
            // invalid shapes surface in validate()
            DMatrix::from_element(q, 0, 0.0)
        };
        PopulationParams { mu: r.mu, omega, sigma: r.sigma }
    }
}

impl PopulationParams {
    /// Values used throughout the simulation study: E0 = 5, Emax = 30,
    /// ED50 = 500, ω² = (0.09, 0.49, 0.49), cov(Emax, ED50) = 0.245, σ = 0.1.
    pub fn reference_emax(gamma: f64, sigma: f64) -> Self {
        PopulationParams {
            mu: vec![5.0, 30.0, 500.0, gamma],
            omega: DMatrix::from_row_slice(3, 3, &[0.09, 0.0, 0.0, 0.0, 0.49, 0.245, 0.0, 0.245, 0.49]),
            sigma: vec![sigma],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let q = spec.n_random();
        if self.mu.len() != spec.n_params() {
            return invalid(format!("mu has {} entries, model needs {}", self.mu.len(), spec.n_params()));
        }
        if self.omega.nrows() != q || self.omega.ncols() != q {
            return invalid(format!("omega must be {q}x{q}"));
        }
        if self.sigma.len() != spec.error_model.n_coefficients() {
            return invalid("wrong number of residual error coefficients");
        }
        if self.mu.iter().chain(self.omega.iter()).chain(&self.sigma).any(|v| !v.is_finite()) {
            return invalid("non-finite population parameter");
        }
        if self.sigma.iter().any(|&s| s < 0.0) {
            return invalid("sigma must be >= 0");
        }
        for (p, &m) in spec.params.iter().zip(&self.mu) {
            if p.transform == Transform::LogNormal && m <= 0.0 {
                return invalid(format!("{} must be > 0 for a log-normal parameter", p.name));
            }
        }
        if !linalg::is_symmetric(&self.omega, 1e-12) {
            return invalid("omega is not symmetric");
        }
        if !linalg::is_psd(&self.omega) {
            return invalid("omega is not positive semidefinite");
        }
        Ok(())
    }

    /// Reported vector: estimated fixed effects, variances, covariances, σ.
    pub fn to_vector(&self, spec: &ModelSpec) -> Vec<f64> {
        let mut v: Vec<f64> = spec.estimated_fixed().iter().map(|&i| self.mu[i]).collect();
        v.extend((0..spec.n_random()).map(|d| self.omega[(d, d)]));
        v.extend(spec.covariance_pairs().iter().map(|&(a, b)| self.omega[(a, b)]));
        v.extend(&self.sigma);
        v
    }

    /// Inverse of [`to_vector`](Self::to_vector); entries not in the
    /// reported vector are taken from `self`.
    pub fn with_vector(&self, spec: &ModelSpec, v: &[f64]) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        for i in spec.estimated_fixed() {
            out.mu[i] = v[k];
            k += 1;
        }
        for d in 0..spec.n_random() {
            out.omega[(d, d)] = v[k];
            k += 1;
        }
        for (a, b) in spec.covariance_pairs() {
            out.omega[(a, b)] = v[k];
            out.omega[(b, a)] = v[k];
            k += 1;
        }
        for s in out.sigma.iter_mut() {
            *s = v[k];
            k += 1;
        }
        out
    }
}

/// Design of one subject: its dose levels and an optional stratum label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDesign {
    pub id: String,
    #[serde(default)]
    pub group: Option<String>,
    pub doses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub subjects: Vec<SubjectDesign>,
}

impl Design {
    /// `count` subjects sharing one dose vector, ids numbered from `first_id`.
    pub fn group(label: &str, count: usize, doses: &[f64], first_id: usize) -> Vec<SubjectDesign> {
        (0..count)
            .map(|k| SubjectDesign { id: (first_id + k).to_string(), group: Some(label.to_string()), doses: doses.to_vec() })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return invalid("design has no subjects");
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if s.doses.is_empty() {
                return invalid(format!("subject {} has no design points", s.id));
            }
            if s.doses.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return invalid(format!("subject {} has a negative or non-finite dose", s.id));
            }
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate subject id {}", s.id));
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.doses.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub theta: PopulationParams,
}

/// Observations aligned with a design: `observations[i][j]` is `y_ij`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub design: Design,
    pub observations: Vec<Vec<f64>>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.observations.len() != self.design.n_subjects() {
            return invalid("observation and design subject counts differ");
        }
        for (s, y) in self.design.subjects.iter().zip(&self.observations) {
            if y.len() != s.doses.len() {
                return invalid(format!("subject {}: {} observations for {} design points", s.id, y.len(), s.doses.len()));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return invalid(format!("subject {} has a missing or non-finite observation", s.id));
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.design.n_subjects()
    }

    pub fn n_observations(&self) -> usize {
        self.design.n_observations()
    }
}

/// Draw `η ~ N(0, Ω)` for every subject and Gaussian residuals, and assemble
/// `y = f + g·ε`. Each subject uses its own stream keyed by its id.
pub fn simulate_dataset(spec: &ModelSpec, theta: &PopulationParams, design: &Design, seed: u64) -> Result<Dataset> {
    theta.validate(spec)?;
    design.validate()?;
    let factor = linalg::psd_factor(&theta.omega);
    let q = spec.n_random();
    let mut psi = vec![0.0; spec.n_params()];
    let mut observations = Vec::with_capacity(design.n_subjects());
    for s in &design.subjects {
        let mut rng = rng::stream(seed, &[tag::SIMULATE, rng::hash_str(&s.id)]);
        let eta = draw_mvn(&factor, q, &mut rng);
        spec.individual(&theta.mu, &eta, &mut psi);
        let y = s
            .doses
            .iter()
            .map(|&x| {
                let f = spec.structural.eval(&psi, x);
                let e: f64 = rng.sample(StandardNormal);
                f + spec.error_model.sd(&theta.sigma, f) * e
            })
            .collect();
        observations.push(y);
    }
    let ds = Dataset { design: design.clone(), observations, provenance: Some(Provenance { seed, theta: theta.clone() }) };
    if ds.observations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("simulated a non-finite observation".into()));
    }
    Ok(ds)
}

/// `L z` with `z ~ N(0, I)`.
pub(crate) fn draw_mvn<R: Rng + ?Sized>(factor: &DMatrix<f64>, q: usize, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
    (0..q).map(|a| (0..q).map(|b| factor[(a, b)] * z[b]).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emax(gamma: f64) -> [f64; 4] {
        [5.0, 30.0, 500.0, gamma]
    }

    #[test]
    fn structural_examples() {
        assert_eq!(evaluate_structural(Structural::SigEmax, &emax(1.0), 0.0).unwrap(), 5.0);
        assert!((evaluate_structural(Structural::SigEmax, &emax(3.0), 500.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((evaluate_structural(Structural::SigEmax, &emax(1.0), 1000.0).unwrap() - 25.0).abs() < 1e-12);
        assert!(evaluate_structural(Structural::SigEmax, &emax(1.0), f64::NAN).is_err());
        assert!(evaluate_structural(Structural::SigEmax, &[5.0, f64::INFINITY, 500.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn error_sd_examples() {
        assert!((evaluate_error_sd(ErrorModel::Proportional, &[0.1], 20.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(evaluate_error_sd(ErrorModel::Proportional, &[0.1], 0.0).unwrap(), 0.0);
        assert_eq!(evaluate_error_sd(ErrorModel::Constant, &[0.3], 99.0).unwrap(), 0.3);
        assert_eq!(evaluate_error_sd(ErrorModel::Combined, &[0.5, 0.1], -10.0).unwrap(), 1.5);
        assert!(evaluate_error_sd(ErrorModel::Constant, &[-0.1], 1.0).is_err());
    }

    #[test]
    fn transform_examples() {
        let spec = ModelSpec::sig_emax(true);
        let mu = emax(3.0);
        let psi = transform_psi(&spec, &mu, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(psi[2], 500.0);
        let psi = transform_psi(&spec, &mu, &[0.0, 0.0, 2f64.ln()]).unwrap();
        assert!((psi[2] - 1000.0).abs() < 1e-9);
        assert_eq!(psi[3], 3.0);
        assert!(transform_psi(&spec, &mu, &[0.0]).is_err());
    }

    #[test]
    fn spec_invariants() {
        assert!(ModelSpec::sig_emax(true).validate().is_ok());
        let mut bad = ModelSpec::sig_emax(true);
        bad.omega_pattern.set(3, 3, true);
        assert!(bad.validate().is_err());
        let mut bad = ModelSpec::sig_emax(true);
        bad.omega_pattern.set(0, 0, false);
        bad.omega_pattern.set(0, 1, true);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_vector_round_trip() {
        let spec = ModelSpec::sig_emax(true);
        let theta = PopulationParams::reference_emax(3.0, 0.1);
        let v = theta.to_vector(&spec);
        assert_eq!(spec.param_names().len(), v.len());
        assert_eq!(v, vec![5.0, 30.0, 500.0, 3.0, 0.09, 0.49, 0.49, 0.245, 0.1]);
        assert_eq!(theta.with_vector(&spec, &v), theta);
        let spec1 = ModelSpec::sig_emax(false);
        assert_eq!(spec1.param_names()[3], "omega2_E0");
    }

    #[test]
    fn noise_free_simulation_is_exact() {
        let spec = ModelSpec::sig_emax(false);
        let mut theta = PopulationParams::reference_emax(1.0, 0.0);
        theta.omega.fill(0.0);
        let design = Design { subjects: Design::group("a", 5, &[0.0, 100.0, 300.0, 1000.0], 1) };
        let ds = simulate_dataset(&spec, &theta, &design, 11).unwrap();
        for (s, y) in ds.design.subjects.iter().zip(&ds.observations) {
            for (&x, &v) in s.doses.iter().zip(y) {
                assert_eq!(v, Structural::SigEmax.eval(&theta.mu, x));
            }
        }
    }

    #[test]
    fn simulation_rejects_non_psd_omega() {
        let spec = ModelSpec::sig_emax(false);
        let mut theta = PopulationParams::reference_emax(1.0, 0.1);
        theta.omega[(1, 2)] = 2.0;
        theta.omega[(2, 1)] = 2.0;
        let design = Design { subjects: Design::group("a", 2, &[0.0], 1) };
        assert!(matches!(simulate_dataset(&spec, &theta, &design, 1), Err(Error::InvalidInput(_))));
    }
}
