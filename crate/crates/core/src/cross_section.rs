//! Fama–MacBeth two-pass estimation and population pseudo-true values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::first_pass::FirstPassEstimates;
use crate::linalg::{most_collinear_pair, singular_values, spd_inverse, spd_solve, spd_solve_vec, symmetrize};
use crate::panel_io::ZeroBetaMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FM")]
    Fm,
    #[serde(rename = "CUE")]
    Cue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    Plain,
    Shanken,
    None,
}

/// A risk-premia point estimate with optional inference.
///
/// `std_errors`, `t_stats` and `conf_intervals` follow the regressor order:
/// the zero-beta rate first when it is estimated, then the factor premia.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiaResult {
    pub method: Method,
    pub lambda_f: Vec<f64>,
    pub lambda_0: Option<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub t_stats: Option<Vec<f64>>,
    /// 95% intervals `estimate -/+ 1.96 se`.
    pub conf_intervals: Option<Vec<(f64, f64)>>,
    pub r_squared: Option<f64>,
    pub se_kind: SeKind,
}

impl PremiaResult {
    /// All estimated coefficients in regressor order.
    pub fn coefficients(&self) -> Vec<f64> {
        self.lambda_0.iter().copied().chain(self.lambda_f.iter().copied()).collect()
    }
}

/// Singular values below `1e-10` times the largest count as rank loss.
const RANK_TOL: f64 = 1e-10;

pub(crate) fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let sv = singular_values(x);
    let (hi, lo) = (sv[0], sv[sv.len() - 1]);
    if x.nrows() < x.ncols() || !(hi > 0.0) || lo < RANK_TOL * hi {
        let (first, second) = most_collinear_pair(x);
        return Err(Error::RankDeficient { first, second });
    }
    Ok(())
}

fn regressors(fp: &FirstPassEstimates, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return fp.beta_hat.clone();
    }
    let (n, k) = fp.beta_hat.shape();
    DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { fp.beta_hat[(i, j - 1)] })
}

/// Second-pass OLS of average returns on betas (plus a constant when the
/// zero-beta rate is estimated).
pub fn fm_two_pass(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<PremiaResult> {
    let intercept = mode == ZeroBetaMode::InterceptEstimated;
    let x = regressors(fp, intercept);
    check_full_rank(&x)?;
    let xtx = symmetrize(&(x.transpose() * &x));
    let coef = spd_solve_vec(&xtx, &(x.transpose() * &fp.mu_hat), "second-pass cross-product")?;
    let coef: Vec<f64> = coef.iter().copied().collect();

    let fitted = &x * DVector::from_column_slice(&coef);
    let mean = fp.mu_hat.mean();
    let sst: f64 = fp.mu_hat.iter().map(|m| (m - mean).powi(2)).sum();
    let ssr: f64 = (&fp.mu_hat - fitted).norm_squared();
    // without an intercept the centred R^2 can go negative; clamp to 0
    let r_squared = if sst > 0.0 { Some((1.0 - ssr / sst).clamp(0.0, 1.0)) } else { None };

    let (lambda_0, lambda_f) = if intercept { (Some(coef[0]), coef[1..].to_vec()) } else { (None, coef) };
    Ok(PremiaResult {
        method: Method::Fm,
        lambda_f,
        lambda_0,
        std_errors: None,
        t_stats: None,
        conf_intervals: None,
        r_squared,
        se_kind: SeKind::None,
    })
}

/// Covariance of the FM coefficients, regressor order.
///
/// Plain: `(1/T) A (Omega + beta Q beta') A'` with `A = (X'X)^{-1} X'`.
/// Shanken: `(1/T) [(1 + c) A Omega A' + Q*]` with `c = lambda' Q^{-1} lambda`
/// and `Q*` the factor covariance bordered by zeros for the intercept; the
/// intercept variance keeps its plain value.
pub fn fm_covariance(fp: &FirstPassEstimates, result: &PremiaResult, correction: SeKind) -> Result<DMatrix<f64>> {
    let intercept = result.lambda_0.is_some();
    let x = regressors(fp, intercept);
    check_full_rank(&x)?;
    let xtx = symmetrize(&(x.transpose() * &x));
    let a = spd_solve(&xtx, &x.transpose(), "second-pass cross-product")?;
    let t = fp.t as f64;
    let k = fp.k();
    let off = usize::from(intercept);

    let a_omega = symmetrize(&(&a * &fp.omega_hat * a.transpose()));
    let mut q_star = DMatrix::zeros(k + off, k + off);
    q_star.view_mut((off, off), (k, k)).copy_from(&fp.qff_hat);
    let plain = (&a_omega + &q_star) / t;

    match correction {
        SeKind::Plain | SeKind::None => Ok(plain),
        SeKind::Shanken => {
            let lam = DVector::from_column_slice(&result.lambda_f);
            let qinv = spd_inverse(&fp.qff_hat, "factor covariance")?;
            let c = (lam.transpose() * qinv * &lam)[(0, 0)];
            let mut cov = (a_omega * (1.0 + c) + q_star) / t;
            if intercept {
                for j in 0..cov.ncols() {
                    cov[(0, j)] = plain[(0, j)];
                    cov[(j, 0)] = plain[(j, 0)];
                }
            }
            Ok(cov)
        }
    }
}

/// Attaches standard errors, t-statistics and 95% intervals.
pub fn fm_tstats(fp: &FirstPassEstimates, result: &PremiaResult, correction: SeKind) -> Result<PremiaResult> {
    let correction = if correction == SeKind::None { SeKind::Plain } else { correction };
    let cov = fm_covariance(fp, result, correction)?;
    let coef = result.coefficients();
    let se: Vec<f64> = (0..coef.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let t_stats = coef.iter().zip(&se).map(|(c, s)| c / s).collect();
    let ci = coef.iter().zip(&se).map(|(c, s)| (c - 1.96 * s, c + 1.96 * s)).collect();
    Ok(PremiaResult {
        std_errors: Some(se),
        t_stats: Some(t_stats),
        conf_intervals: Some(ci),
        se_kind: correction,
        ..result.clone()
    })
}

/// Population model `mu_R = beta lambda_F + e`, with `beta = O(beta) b` and
/// `e = O(e) a` for unit-norm directions `b` (Frobenius) and `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    pub mu_r: DVector<f64>,
    pub beta: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub qff: DMatrix<f64>,
    pub lambda_f: DVector<f64>,
    pub e_tilde: DVector<f64>,
}

impl PopulationModel {
    /// Builds the model, setting `mu_r = beta lambda_f + e_tilde`.
    pub fn new(
        beta: DMatrix<f64>,
        lambda_f: DVector<f64>,
        e_tilde: DVector<f64>,
        omega: DMatrix<f64>,
        qff: DMatrix<f64>,
    ) -> Result<Self> {
        let (n, k) = beta.shape();
        if lambda_f.len() != k || e_tilde.len() != n || omega.shape() != (n, n) || qff.shape() != (k, k) {
            return Err(Error::InvalidInput("population model dimensions disagree".into()));
        }
        let mu_r = &beta * &lambda_f + &e_tilde;
        Ok(Self { mu_r, beta, omega, qff, lambda_f, e_tilde })
    }

    /// Builds the model from directions and magnitudes.
    pub fn from_directions(
        b: &DMatrix<f64>,
        a: &DVector<f64>,
        beta_scale: f64,
        e_scale: f64,
        lambda_f: DVector<f64>,
        omega: DMatrix<f64>,
        qff: DMatrix<f64>,
    ) -> Result<Self> {
        let (bn, an) = (b.norm(), a.norm());
        if bn == 0.0 || an == 0.0 {
            return Err(Error::InvalidInput("beta and misspecification directions must be nonzero".into()));
        }
        Self::new(b * (beta_scale / bn), lambda_f, a * (e_scale / an), omega, qff)
    }

    pub fn n(&self) -> usize {
        self.beta.nrows()
    }

    pub fn k(&self) -> usize {
        self.beta.ncols()
    }

    /// `O(beta)`, the Frobenius norm of beta.
    pub fn beta_scale(&self) -> f64 {
        self.beta.norm()
    }

    /// `O(e)`, the Euclidean norm of the pricing error.
    pub fn e_scale(&self) -> f64 {
        self.e_tilde.norm()
    }

    /// Same model with beta and pricing error rescaled to new magnitudes
    /// along the current directions.
    pub fn rescaled(&self, beta_scale: f64, e_scale: f64) -> Result<Self> {
        let b = &self.beta / self.beta_scale();
        let a = if self.e_scale() > 0.0 { &self.e_tilde / self.e_scale() } else { self.e_tilde.clone() };
        Self::new(b * beta_scale, self.lambda_f.clone(), a * e_scale, self.omega.clone(), self.qff.clone())
    }
}

/// `(beta' beta)^{-1} beta' mu_R`.
pub fn fm_pseudo_true(pm: &PopulationModel) -> Result<DVector<f64>> {
    check_full_rank(&pm.beta)?;
    let btb = symmetrize(&(pm.beta.transpose() * &pm.beta));
    spd_solve_vec(&btb, &(pm.beta.transpose() * &pm.mu_r), "beta cross-product")
}

fn check_repackaging(a: &DMatrix<f64>, n: usize) -> Result<()> {
    if a.shape() != (n, n) {
        return Err(Error::InvalidInput(format!("repackaging matrix must be {n}x{n}")));
    }
    let ones = DVector::from_element(n, 1.0);
    if (a * &ones - &ones).amax() > 1e-10 {
        return Err(Error::InvalidInput("repackaging matrix rows must sum to one".into()));
    }
    let sv = singular_values(a);
    if !(sv[n - 1] > 0.0) || sv[0] / sv[n - 1] >= 1e10 {
        return Err(Error::Singular("repackaging matrix".into()));
    }
    Ok(())
}

/// Repackages a population model into portfolios `A R_t` (`A iota = iota`).
pub fn repackage_model(pm: &PopulationModel, a: &DMatrix<f64>) -> Result<PopulationModel> {
    check_repackaging(a, pm.n())?;
    PopulationModel::new(
        a * &pm.beta,
        pm.lambda_f.clone(),
        a * &pm.e_tilde,
        symmetrize(&(a * &pm.omega * a.transpose())),
        pm.qff.clone(),
    )
}

/// Repackages first-pass estimates into portfolios `A R_t` (`A iota = iota`).
pub fn repackage_estimates(fp: &FirstPassEstimates, a: &DMatrix<f64>) -> Result<FirstPassEstimates> {
    check_repackaging(a, fp.n())?;
    let names = (1..=fp.n()).map(|i| format!("portfolio{i}")).collect();
    fp.transform_assets(a, names)
}
