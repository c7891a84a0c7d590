//! First-order (FO) Fisher information and asymptotic intervals.
//!
//! The model is linearized around `η = 0`:
//! `y_i ≈ f(x_i; μ) + J_i η_i + g·ε_i`, so that
//! `y_i ~ N(m_i, V_i)` with `V_i = J_i Ω J_iᵀ + diag(g²)`. The fixed-effect
//! block is `Σ Dᵢᵀ V_i⁻¹ D_i` (`D_i = ∂m_i/∂μ`), the variance block is
//! `½ Σ tr(V_i⁻¹ ∂_a V_i V_i⁻¹ ∂_b V_i)`, and the cross block is zero.
//! Derivatives of `f` use central differences with step
//! `max(1e−4·|θ_p|, 1e−6)`.

use nalgebra::DMatrix;

use super::PopulationEstimate;
use crate::error::Result;
use crate::model::{Dataset, ErrorModel, ModelSpec, PopulationParams};
use crate::stats::{normal_ci, Interval};

#[derive(Clone, Debug, PartialEq)]
pub struct FimResult {
    /// Row-major information matrix over the reported parameters.
    pub fim: Vec<Vec<f64>>,
    pub se: Vec<Option<f64>>,
}

fn fd_step(v: f64) -> f64 {
    (1e-4 * v.abs()).max(1e-6)
}

/// FO Fisher information at `theta` and the standard errors derived from it.
pub fn compute_fim(spec: &ModelSpec, dataset: &Dataset, theta: &PopulationParams) -> Result<FimResult> {
    theta.validate(spec)?;
    dataset.validate()?;
    let fixed = spec.estimated_fixed();
    let random = spec.random_indices();
    let pairs = spec.covariance_pairs();
    let q = random.len();
    let n_sig = theta.sigma.len();
    let pf = fixed.len();
    let pv = q + pairs.len() + n_sig;
    let np = spec.n_params();

    let mut f_fixed = DMatrix::<f64>::zeros(pf, pf);
    let mut f_var = DMatrix::<f64>::zeros(pv, pv);
    let mut psi = theta.mu.clone();

    for (s, _) in dataset.design.subjects.iter().zip(&dataset.observations) {
        let n = s.doses.len();
        let mean: Vec<f64> = s.doses.iter().map(|&x| spec.structural.eval(&theta.mu, x)).collect();
        // ∂f/∂ψ_p at ψ = μ for every structural parameter
        let mut grad = DMatrix::<f64>::zeros(n, np);
        for p in 0..np {
            let h = fd_step(theta.mu[p]);
            for (j, &x) in s.doses.iter().enumerate() {
                psi[p] = theta.mu[p] + h;
                let up = spec.structural.eval(&psi, x);
                psi[p] = theta.mu[p] - h;
                let down = spec.structural.eval(&psi, x);
                grad[(j, p)] = (up - down) / (2.0 * h);
            }
            psi[p] = theta.mu[p];
        }
        let d = DMatrix::from_fn(n, pf, |j, k| grad[(j, fixed[k])]);
        let jac = DMatrix::from_fn(n, q, |j, a| {
            let p = random[a];
            grad[(j, p)] * spec.params[p].transform.jacobian(theta.mu[p])
        });
        let g: Vec<f64> = mean.iter().map(|&m| spec.error_model.sd(&theta.sigma, m)).collect();
        let mut v = &jac * &theta.omega * jac.transpose();
        for j in 0..n {
            v[(j, j)] += g[j] * g[j];
        }
        let Some(vinv) = v.clone().cholesky().map(|c| c.inverse()) else {
            continue;
        };

        f_fixed += d.transpose() * &vinv * &d;

        let mut dv: Vec<DMatrix<f64>> = Vec::with_capacity(pv);
        for a in 0..q {
            let c = jac.column(a);
            dv.push(c * c.transpose());
        }
        for &(a, b) in &pairs {
            let (ca, cb) = (jac.column(a), jac.column(b));
            dv.push(ca * cb.transpose() + cb * ca.transpose());
        }
        for c in 0..n_sig {
            let dg: Vec<f64> = mean
                .iter()
                .map(|&m| match (spec.error_model, c) {
                    (ErrorModel::Constant, _) | (ErrorModel::Combined, 0) => 1.0,
                    _ => m.abs(),
                })
                .collect();
            dv.push(DMatrix::from_fn(n, n, |r, k| if r == k { 2.0 * g[r] * dg[r] } else { 0.0 }));
        }
        let w: Vec<DMatrix<f64>> = dv.iter().map(|m| &vinv * m).collect();
        for a in 0..pv {
            for b in 0..=a {
                // tr(A B) = Σ_rc A_rc B_cr
                let t: f64 = (0..n).map(|r| (0..n).map(|c| w[a][(r, c)] * w[b][(c, r)]).sum::<f64>()).sum();
                f_var[(a, b)] += 0.5 * t;
            }
        }
    }
    for a in 0..pv {
        for b in 0..a {
            f_var[(b, a)] = f_var[(a, b)];
        }
    }
    let f_fixed = crate::linalg::symmetrize(&f_fixed);

    let p = pf + pv;
    let mut fim = vec![vec![0.0; p]; p];
    for a in 0..pf {
        for b in 0..pf {
            fim[a][b] = f_fixed[(a, b)];
        }
    }
    for a in 0..pv {
        for b in 0..pv {
            fim[pf + a][pf + b] = f_var[(a, b)];
        }
    }
    let mut se = block_se(&f_fixed);
    se.extend(block_se(&f_var));
    Ok(FimResult { fim, se })
}

/// `sqrt(diag(F⁻¹))`. Parameters with no information are dropped before
/// inversion; if the rest is still singular the whole block is unavailable.
fn block_se(f: &DMatrix<f64>) -> Vec<Option<f64>> {
    let p = f.nrows();
    let scale = (0..p).map(|i| f[(i, i)].abs()).fold(0.0, f64::max);
    let keep: Vec<usize> = (0..p).filter(|&i| f[(i, i)] > 1e-14 * scale && f[(i, i)].is_finite()).collect();
    let mut out = vec![None; p];
    if keep.is_empty() {
        return out;
    }
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| f[(keep[a], keep[b])]);
    // equilibrate before factoring: parameters live on very different scales
    let dscale: Vec<f64> = (0..keep.len()).map(|a| sub[(a, a)].sqrt()).collect();
    let scaled = DMatrix::from_fn(keep.len(), keep.len(), |a, b| sub[(a, b)] / (dscale[a] * dscale[b]));
    if let Some(ch) = scaled.cholesky() {
        let inv = ch.inverse();
        for (a, &i) in keep.iter().enumerate() {
            let var = inv[(a, a)] / (dscale[a] * dscale[a]);
            if var.is_finite() && var >= 0.0 {
                out[i] = Some(var.sqrt());
            }
        }
    }
    out
}

/// Normal-approximation intervals `θ̂ ± z_{1−α/2}·SE` for every reported
/// parameter; `None` where the SE is unavailable.
pub fn asymptotic_ci(estimate: &PopulationEstimate, alpha: f64) -> Vec<Option<Interval>> {
    estimate.values.iter().zip(&estimate.se).map(|(&v, se)| se.and_then(|s| normal_ci(v, s, alpha))).collect()
}
