//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).iter().all(|v| v.abs() <= tol)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `m x = b` for SPD `m`, falling back to LU when Cholesky fails.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn spd_solve_vec(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = spd_solve(m, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), what)?;
    Ok(x.column(0).into_owned())
}

/// `L^{-1} b` for lower-triangular `l`.
pub fn forward_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| Error::Singular("triangular factor".into()))
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Ratio of largest to smallest eigenvalue of a symmetric PSD matrix
/// (`inf` when the smallest is not positive).
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `m^p` for symmetric PSD `m` through its eigendecomposition. Eigenvalues
/// below zero are clamped to zero, so negative powers need a PD input.
pub fn sym_power(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| if v > 0.0 { v.powf(p) } else { 0.0 });
    let u = &eig.eigenvectors;
    symmetrize(&(u * DMatrix::from_diagonal(&vals) * u.transpose()))
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Pair of columns with the largest absolute cosine similarity.
pub fn most_collinear_pair(m: &DMatrix<f64>) -> (usize, usize) {
    let p = m.ncols();
    let norms: Vec<f64> = (0..p).map(|j| m.column(j).norm()).collect();
    let mut best = (0, p.saturating_sub(1).min(1), -1.0);
    for i in 0..p {
        for j in (i + 1)..p {
            let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                1.0
            } else {
                m.column(i).dot(&m.column(j)).abs() / (norms[i] * norms[j])
            };
            if cos > best.2 {
                best = (i, j, cos);
            }
        }
    }
    (best.0, best.1)
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let t = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / t))
}

/// Subtracts `means` from every row of `m`.
pub fn demean(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_power_inverts() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let half = sym_power(&m, 0.5);
        assert!((&half * &half - &m).norm() < 1e-12);
        let inv_half = sym_power(&m, -0.5);
        let id = &inv_half * &m * &inv_half;
        assert!((id - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn collinear_pair_is_found() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 1.0, 1.0, 2.0, 1.0, -1.0, 2.0]);
        assert_eq!(most_collinear_pair(&m), (0, 2));
    }

    #[test]
    fn condition_of_singular_is_infinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(sym_condition(&m) > 1e15);
    }
}
