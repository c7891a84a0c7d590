//! Small dense symmetric-matrix helpers built on nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue tolerance under which a matrix still counts as PSD.
pub const PSD_TOL: f64 = 1e-10;

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(m.clone())
}

/// True when every eigenvalue is at least `-PSD_TOL * max eigenvalue`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let ev = eigen(m).eigenvalues;
    let max = ev.max().max(0.0);
    ev.iter().all(|&l| l >= -PSD_TOL * max)
}

/// Nearest PSD matrix by clipping negative eigenvalues at zero.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigenvalues(m, |l| l.max(0.0))
}

/// `V diag(g(λ)) Vᵀ` for the symmetric eigendecomposition of `m`.
pub fn map_eigenvalues(m: &DMatrix<f64>, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let e = eigen(m);
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&l| g(l)));
    let v = &e.eigenvectors;
    let out = v * DMatrix::from_diagonal(&d) * v.transpose();
    symmetrize(&out)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigenvalues(m, |l| l.max(0.0).sqrt())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// A factor `L` with `L Lᵀ = m` for PSD `m`. Cholesky when possible,
/// otherwise the symmetric square root (handles singular matrices).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(c) => c.l(),
        None => sqrt_psd(m),
    }
}

/// Sample covariance (divisor n - 1) of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let q = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; q];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(q, q);
    for r in rows {
        for a in 0..q {
            let da = r[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for a in 0..q {
        for b in 0..=a {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reproduces_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&m);
        assert!(frobenius_rel(&(&l * l.transpose()), &m) < 1e-12);
    }

    #[test]
    fn projection_clips_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_psd(&m));
        let p = project_psd(&m);
        assert!(is_psd(&p));
        // eigenvalues 3 and -1 → keep only the 3 component
        assert!((p[(0, 0)] - 1.5).abs() < 1e-12);
        assert!((p[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sample_covariance_uses_n_minus_one() {
        let rows = vec![vec![1.0], vec![3.0]];
        assert_eq!(sample_covariance(&rows)[(0, 0)], 2.0);
    }
}
