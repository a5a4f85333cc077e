//! Time-series regressions of returns on factors.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{column_means, demean, spd_solve, sym_eigenvalues, symmetrize};
use crate::panel_io::AlignedDataset;
use crate::{Error, Result};

/// Moment estimates from the first-pass regressions
/// `R_t = alpha + beta F_t + u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPassEstimates {
    /// `N x K`
    pub beta_hat: DMatrix<f64>,
    /// `N x N`, `(1/T) sum u_t u_t'`
    pub omega_hat: DMatrix<f64>,
    /// `K x K`, `(1/T) sum (F_t - Fbar)(F_t - Fbar)'`
    pub qff_hat: DMatrix<f64>,
    /// Average returns `Rbar`.
    pub mu_hat: DVector<f64>,
    pub fbar: DVector<f64>,
    pub t: usize,
    /// Per-equation OLS t-statistics (`T - K - 1` divisor); `+inf` where the
    /// standard error is zero.
    pub beta_tstats: DMatrix<f64>,
    pub asset_names: Vec<String>,
    pub factor_names: Vec<String>,
}

/// Rejects factor covariances whose eigenvalue spread exceeds `1e12`.
pub(crate) fn check_factor_covariance(qff: &DMatrix<f64>) -> Result<()> {
    let ev = sym_eigenvalues(qff);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::SingularFactorCovariance { ratio: if hi > 0.0 { lo / hi } else { 0.0 } });
    }
    Ok(())
}

pub(crate) fn beta_tstats(beta: &DMatrix<f64>, omega: &DMatrix<f64>, qff: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let (n, k) = beta.shape();
    let dof = t as f64 - k as f64 - 1.0;
    // (sum Fbar_t Fbar_t')^{-1} = (T Q)^{-1}
    let inv_sff = match (qff * t as f64).try_inverse() {
        Some(m) => m,
        None => return DMatrix::from_element(n, k, f64::NAN),
    };
    let fitted = beta * qff * beta.transpose();
    DMatrix::from_fn(n, k, |i, j| {
        // residual variance below rounding level of the total counts as zero
        let total = omega[(i, i)] + fitted[(i, i)];
        let s2 = omega[(i, i)] * t as f64 / dof;
        let se = (s2 * inv_sff[(j, j)]).max(0.0).sqrt();
        if se == 0.0 || omega[(i, i)] <= (1e3 * f64::EPSILON).powi(2) * total {
            f64::INFINITY
        } else {
            beta[(i, j)] / se
        }
    })
}

/// Runs the first pass directly from `T x N` returns and `T x K` factors.
pub fn first_pass_from_panels(returns: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<FirstPassEstimates> {
    let (t, n) = returns.shape();
    let k = factors.ncols();
    if factors.nrows() != t {
        return Err(Error::InvalidInput("returns and factors differ in length".into()));
    }
    if k == 0 || n == 0 {
        return Err(Error::InvalidInput("need at least one asset and one factor".into()));
    }
    if t <= k + 1 {
        return Err(Error::SampleTooSmall { t, needed: k + 1 });
    }
    let mu_hat = column_means(returns);
    let fbar = column_means(factors);
    let rc = demean(returns, &mu_hat);
    let fc = demean(factors, &fbar);

    let sff = symmetrize(&(fc.transpose() * &fc));
    let qff_hat = &sff / t as f64;
    check_factor_covariance(&qff_hat)?;

    let sfr = fc.transpose() * &rc;
    let beta_hat = spd_solve(&sff, &sfr, "factor cross-product")?.transpose();
    let resid = rc - &fc * beta_hat.transpose();
    let omega_hat = symmetrize(&(resid.transpose() * &resid / t as f64));

    let beta_tstats = beta_tstats(&beta_hat, &omega_hat, &qff_hat, t);
    Ok(FirstPassEstimates {
        beta_hat,
        omega_hat,
        qff_hat,
        mu_hat,
        fbar,
        t,
        beta_tstats,
        asset_names: (1..=n).map(|i| format!("asset{i}")).collect(),
        factor_names: (1..=k).map(|i| format!("factor{i}")).collect(),
    })
}

pub fn estimate_first_pass(ds: &AlignedDataset) -> Result<FirstPassEstimates> {
    let mut fp = first_pass_from_panels(&ds.returns, &ds.factors)?;
    fp.asset_names = ds.return_names.clone();
    fp.factor_names = ds.factor_names.clone();
    Ok(fp)
}

impl FirstPassEstimates {
    pub fn n(&self) -> usize {
        self.beta_hat.nrows()
    }

    pub fn k(&self) -> usize {
        self.beta_hat.ncols()
    }

    /// Estimates for the portfolios `A R_t` (`A` is `M x N`): mean and betas
    /// map linearly, `Omega -> A Omega A'`, factor moments are unchanged.
    pub fn transform_assets(&self, a: &DMatrix<f64>, asset_names: Vec<String>) -> Result<Self> {
        if a.ncols() != self.n() || asset_names.len() != a.nrows() {
            return Err(Error::InvalidInput(format!(
                "asset transform is {}x{}, estimates have {} assets",
                a.nrows(),
                a.ncols(),
                self.n()
            )));
        }
        let beta_hat = a * &self.beta_hat;
        let omega_hat = symmetrize(&(a * &self.omega_hat * a.transpose()));
        let beta_tstats = beta_tstats(&beta_hat, &omega_hat, &self.qff_hat, self.t);
        Ok(Self {
            beta_hat,
            omega_hat,
            qff_hat: self.qff_hat.clone(),
            mu_hat: a * &self.mu_hat,
            fbar: self.fbar.clone(),
            t: self.t,
            beta_tstats,
            asset_names,
            factor_names: self.factor_names.clone(),
        })
    }

    /// Differences every asset against `reference` (the `J_N` map), dropping it.
    pub fn reference_difference(&self, reference: usize) -> Result<Self> {
        let n = self.n();
        if reference >= n || n < 2 {
            return Err(Error::InvalidInput(format!("reference index {reference} out of range for {n} assets")));
        }
        let keep: Vec<usize> = (0..n).filter(|&j| j != reference).collect();
        let mut jn = DMatrix::zeros(n - 1, n);
        for (r, &j) in keep.iter().enumerate() {
            jn[(r, j)] = 1.0;
            jn[(r, reference)] = -1.0;
        }
        let names = keep.iter().map(|&j| self.asset_names[j].clone()).collect();
        self.transform_assets(&jn, names)
    }
}

/// One asset's row in the beta significance table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BetaRow {
    pub asset: String,
    pub beta: Vec<f64>,
    pub t_stat: Vec<f64>,
}

/// `(beta, t)` pairs per asset in input order.
pub fn beta_significance_table(fp: &FirstPassEstimates) -> Vec<BetaRow> {
    (0..fp.n())
        .map(|i| BetaRow {
            asset: fp.asset_names[i].clone(),
            beta: fp.beta_hat.row(i).iter().copied().collect(),
            t_stat: fp.beta_tstats.row(i).iter().copied().collect(),
        })
        .collect()
}

/// Renders the table as CSV text (`asset,<f>_beta,<f>_t,...`), `inf` for
/// infinite t-statistics.
pub fn beta_table_csv(fp: &FirstPassEstimates) -> String {
    let mut out = String::from("asset");
    for f in &fp.factor_names {
        out.push_str(&format!(",{f}_beta,{f}_t"));
    }
    out.push('\n');
    for row in beta_significance_table(fp) {
        out.push_str(&row.asset);
        for (b, t) in row.beta.iter().zip(&row.t_stat) {
            out.push_str(&format!(",{b:?},{t:?}"));
        }
        out.push('\n');
    }
    out
}
