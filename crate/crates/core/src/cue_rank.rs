//! Continuous-updating estimation and the J / IS rank statistics.
//!
//! Both statistics are `T` times the smallest root of a symmetric-definite
//! pencil `|tau D - M| = 0`:
//!
//! - J: `M = (Rbar, beta)' Omega^{-1} (Rbar, beta)`, `D = diag(1, Q^{-1})`.
//! - IS: `M = beta' Omega^{-1} beta`, `D = Q^{-1}`.
//!
//! The J pencil's smallest-root eigenvector is proportional to
//! `(1, -lambda_CUE')'`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::chisq;
use crate::cross_section::{Method, PopulationModel, PremiaResult, SeKind};
use crate::first_pass::FirstPassEstimates;
use crate::linalg::{cholesky_lower, forward_solve, is_symmetric, max_abs, spd_inverse, sym_condition, symmetrize};
use crate::panel_io::ZeroBetaMode;
use crate::{Error, Result};

/// Residual covariances with eigenvalue spread beyond this are singular.
pub const OMEGA_CONDITION_LIMIT: f64 = 1e12;
/// Relative size below which the leading eigenvector entry means the
/// premia are unbounded.
pub const CUE_PIVOT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSolution {
    pub smallest_root: f64,
    /// Unit-norm eigenvector of the smallest root.
    pub eigvec: Vec<f64>,
    /// Ascending.
    pub all_roots: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticPair {
    pub j_stat: f64,
    pub is_stat: f64,
    pub df_j: usize,
    pub df_is: usize,
    pub p_j: f64,
    pub p_is: f64,
}

/// Generalized symmetric-definite eigenproblem via `D = L L'` and the
/// ordinary eigenproblem of `L^{-1} M L^{-T}`.
pub fn solve_pencil(m: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<EigenSolution> {
    let p = m.nrows();
    if !m.is_square() || d.shape() != (p, p) || p == 0 {
        return Err(Error::InvalidInput("pencil matrices must be square and conformable".into()));
    }
    if !is_symmetric(m, 1e-10 * max_abs(m).max(1.0)) {
        return Err(Error::InvalidInput("pencil matrix M is not symmetric".into()));
    }
    let l = cholesky_lower(&symmetrize(d), "pencil metric D")?;
    let x = forward_solve(&l, &symmetrize(m))?;
    let c = symmetrize(&forward_solve(&l, &x.transpose())?);
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let all_roots: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    // x = L^{-T} y
    let y = eig.eigenvectors.column(order[0]).into_owned();
    let v = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Singular("triangular factor".into()))?;
    let v = &v / v.norm();
    Ok(EigenSolution { smallest_root: all_roots[0], eigvec: v.iter().copied().collect(), all_roots })
}

/// Estimates the rank statistics operate on. With an estimated zero-beta
/// rate every asset is differenced against the last one, which removes the
/// intercept and one degree of freedom.
pub fn effective_estimates(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<FirstPassEstimates> {
    match mode {
        ZeroBetaMode::InterceptEstimated => fp.reference_difference(fp.n() - 1),
        _ => Ok(fp.clone()),
    }
}

/// Cholesky factor of `Omega` after the conditioning check.
pub(crate) fn omega_factor(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = sym_condition(omega);
    if !(condition <= OMEGA_CONDITION_LIMIT) {
        return Err(Error::SingularOmega { condition });
    }
    cholesky_lower(omega, "residual covariance")
}

/// `(Rbar, beta)` whitened by the Cholesky factor of `Omega`.
fn whitened(mu: &DVector<f64>, beta: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = beta.shape();
    let mut y = DMatrix::zeros(n, k + 1);
    y.set_column(0, mu);
    y.view_mut((0, 1), (n, k)).copy_from(beta);
    forward_solve(&omega_factor(omega)?, &y)
}

fn j_pencil(mu: &DVector<f64>, beta: &DMatrix<f64>, omega: &DMatrix<f64>, qff: &DMatrix<f64>) -> Result<EigenSolution> {
    let k = beta.ncols();
    let z = whitened(mu, beta, omega)?;
    let m = symmetrize(&(z.transpose() * &z));
    let mut d = DMatrix::zeros(k + 1, k + 1);
    d[(0, 0)] = 1.0;
    d.view_mut((1, 1), (k, k)).copy_from(&spd_inverse(qff, "factor covariance")?);
    solve_pencil(&m, &d)
}

fn is_pencil(beta: &DMatrix<f64>, omega: &DMatrix<f64>, qff: &DMatrix<f64>) -> Result<EigenSolution> {
    let z = forward_solve(&omega_factor(omega)?, beta)?;
    let m = symmetrize(&(z.transpose() * &z));
    solve_pencil(&m, &spd_inverse(qff, "factor covariance")?)
}

fn require_overidentified(fp: &FirstPassEstimates) -> Result<()> {
    if fp.n() <= fp.k() {
        return Err(Error::InvalidInput(format!(
            "rank statistics need more test assets than factors ({} assets, {} factors after zero-beta handling)",
            fp.n(),
            fp.k()
        )));
    }
    Ok(())
}

/// Misspecification statistic `J = T x smallest root`, with the pencil
/// solution it came from.
pub fn j_statistic(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<(f64, EigenSolution)> {
    let eff = effective_estimates(fp, mode)?;
    require_overidentified(&eff)?;
    let sol = j_pencil(&eff.mu_hat, &eff.beta_hat, &eff.omega_hat, &eff.qff_hat)?;
    Ok((eff.t as f64 * sol.smallest_root.max(0.0), sol))
}

/// Identification-strength statistic `IS = T x smallest root`.
pub fn is_statistic(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<f64> {
    let eff = effective_estimates(fp, mode)?;
    require_overidentified(&eff)?;
    let sol = is_pencil(&eff.beta_hat, &eff.omega_hat, &eff.qff_hat)?;
    Ok(eff.t as f64 * sol.smallest_root.max(0.0))
}

/// J and IS with their chi-square degrees of freedom and p-values.
pub fn diagnostics(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<DiagnosticPair> {
    let eff = effective_estimates(fp, mode)?;
    let (j_stat, _) = j_statistic(&eff, ZeroBetaMode::ImposedZero)?;
    let is_stat = is_statistic(&eff, ZeroBetaMode::ImposedZero)?;
    Ok(pair(j_stat, is_stat, eff.n(), eff.k()))
}

pub(crate) fn pair(j_stat: f64, is_stat: f64, n: usize, k: usize) -> DiagnosticPair {
    let (df_j, df_is) = (n - k, n - k + 1);
    DiagnosticPair {
        j_stat,
        is_stat,
        df_j,
        df_is,
        p_j: chisq::sf(j_stat, df_j as f64),
        p_is: chisq::sf(is_stat, df_is as f64),
    }
}

/// `lambda = -v[1..] / v[0]`, or an error when `v[0]` is negligible.
pub(crate) fn lambda_from_eigvec(v: &[f64]) -> Result<DVector<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(v[0].abs() > CUE_PIVOT_TOL * norm) {
        return Err(Error::CueUnbounded { eigvec: v.to_vec() });
    }
    Ok(DVector::from_iterator(v.len() - 1, v[1..].iter().map(|x| -x / v[0])))
}

/// Continuous-updating estimator of the factor premia. Under an estimated
/// zero-beta rate the intercept is the GLS intercept of the pricing errors.
pub fn cue_estimate(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<PremiaResult> {
    let eff = effective_estimates(fp, mode)?;
    if eff.n() < eff.k() {
        return Err(Error::InvalidInput("continuous-updating estimation needs at least as many assets as factors".into()));
    }
    let sol = j_pencil(&eff.mu_hat, &eff.beta_hat, &eff.omega_hat, &eff.qff_hat)?;
    let lambda = lambda_from_eigvec(&sol.eigvec)?;
    let lambda_0 = if mode == ZeroBetaMode::InterceptEstimated {
        let l = omega_factor(&fp.omega_hat)?;
        let e = &fp.mu_hat - &fp.beta_hat * &lambda;
        let we = forward_solve(&l, &DMatrix::from_column_slice(e.len(), 1, e.as_slice()))?;
        let wi = forward_solve(&l, &DMatrix::from_element(e.len(), 1, 1.0))?;
        Some(wi.dot(&we) / wi.norm_squared())
    } else {
        None
    };
    Ok(PremiaResult {
        method: Method::Cue,
        lambda_f: lambda.iter().copied().collect(),
        lambda_0,
        std_errors: None,
        t_stats: None,
        conf_intervals: None,
        r_squared: None,
        se_kind: SeKind::None,
    })
}

/// Population CUE premia and the population J (smallest root, unscaled).
pub fn cue_pseudo_true(pm: &PopulationModel) -> Result<(DVector<f64>, f64)> {
    let sol = j_pencil(&pm.mu_r, &pm.beta, &pm.omega, &pm.qff)?;
    let lambda = lambda_from_eigvec(&sol.eigvec)?;
    Ok((lambda, sol.smallest_root.max(0.0)))
}

/// Sample CUE objective `(Rbar - beta l)' Omega^{-1} (Rbar - beta l) / (1 + l' Q^{-1} l)`.
pub fn cue_objective(fp: &FirstPassEstimates, l: &DVector<f64>) -> Result<f64> {
    let lo = omega_factor(&fp.omega_hat)?;
    let e = &fp.mu_hat - &fp.beta_hat * l;
    let w = forward_solve(&lo, &DMatrix::from_column_slice(e.len(), 1, e.as_slice()))?;
    let qinv = spd_inverse(&fp.qff_hat, "factor covariance")?;
    Ok(w.norm_squared() / (1.0 + (l.transpose() * qinv * l)[(0, 0)]))
}
