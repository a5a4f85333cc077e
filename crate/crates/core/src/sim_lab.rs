//! Simulation lab: calibrated Gaussian factor-model DGPs, rejection-frequency
//! surfaces, pseudo-true-value contours and the small-beta decomposition of
//! the FM estimator.
//!
//! Every replication draws from its own ChaCha8 stream seeded with
//! `splitmix64(seed ^ rep)`, so results do not depend on the thread count and
//! all cells of a surface share common random numbers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::chisq;
use crate::cross_section::{fm_pseudo_true, fm_two_pass, PopulationModel, SeKind};
use crate::cue_rank::{cue_estimate, cue_pseudo_true};
use crate::drlm::{segment_rejects, DrlmWorkspace};
use crate::first_pass::{first_pass_from_panels, FirstPassEstimates};
use crate::linalg::{cholesky_lower, spd_inverse, spd_solve_vec, sym_power, symmetrize};
use crate::panel_io::{AlignedDataset, ZeroBetaMode};
use crate::{Error, Result};

/// 64-bit finalizer used to derive per-replication seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ rep))
}

/// Source of the misspecification direction in [`calibrate`].
#[derive(Debug, Clone, PartialEq)]
pub enum EDirection {
    /// The FM second-pass residual.
    Residual,
    Custom(DVector<f64>),
}

/// Population model matching the estimates' covariances and beta direction,
/// at the estimates' own beta and pricing-error magnitudes.
pub fn calibrate(fp: &FirstPassEstimates, lambda_f: DVector<f64>, e_direction: EDirection) -> Result<PopulationModel> {
    let fm = fm_two_pass(fp, ZeroBetaMode::ImposedZero)?;
    let resid = &fp.mu_hat - &fp.beta_hat * DVector::from_vec(fm.lambda_f);
    let a = match e_direction {
        EDirection::Residual => {
            if resid.norm() <= 1e-12 * fp.mu_hat.norm().max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidInput("second-pass residual is zero; no misspecification direction".into()));
            }
            resid.clone()
        }
        EDirection::Custom(v) => {
            if v.len() != fp.n() || v.norm() == 0.0 {
                return Err(Error::InvalidInput(format!("custom direction must be a nonzero vector of length {}", fp.n())));
            }
            v
        }
    };
    let e_scale = if resid.norm() > 0.0 { resid.norm() } else { 1.0 };
    PopulationModel::from_directions(
        &fp.beta_hat,
        &a,
        fp.beta_hat.norm(),
        e_scale,
        lambda_f,
        fp.omega_hat.clone(),
        fp.qff_hat.clone(),
    )
}

/// Deterministic synthetic population with `n` assets and `k` factors: unit
/// factor variances, equicorrelated residuals, baseline premia of 2.
pub fn synthetic_model(n: usize, k: usize) -> Result<PopulationModel> {
    if k == 0 || n <= k {
        return Err(Error::InvalidInput("synthetic model needs 0 < k < n".into()));
    }
    let b = DMatrix::from_fn(n, k, |i, j| 1.0 + 0.5 * (((i + 1) * (j + 2)) as f64 * 0.7).sin());
    let a = DVector::from_fn(n, |i, _| ((i + 1) as f64 * 1.3).cos());
    let omega = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + 0.02 * i as f64 } else { 0.3 });
    PopulationModel::from_directions(&b, &a, b.norm(), a.norm(), DVector::from_element(k, 2.0), omega, DMatrix::identity(k, k))
}

/// A Gaussian DGP: `R_t = mu_R + beta (F_t - mu_f) + u_t`,
/// `F_t ~ N(mu_f, Q)`, `u_t ~ N(0, Omega)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    /// Model at the requested scales.
    pub pm: PopulationModel,
    pub mu_f: DVector<f64>,
    pub t: usize,
    pub seed: u64,
    pub beta_scale: f64,
    pub e_scale: f64,
}

impl DgpSpec {
    /// Rescales `base` to Frobenius norm `beta_scale` for beta and Euclidean
    /// norm `e_scale` for the pricing error, keeping directions and premia.
    pub fn new(base: &PopulationModel, mu_f: DVector<f64>, t: usize, seed: u64, beta_scale: f64, e_scale: f64) -> Result<Self> {
        if mu_f.len() != base.k() || t < base.k() + 2 || !(beta_scale >= 0.0) || !(e_scale >= 0.0) {
            return Err(Error::InvalidInput("invalid DGP settings".into()));
        }
        Ok(Self { pm: base.rescaled(beta_scale, e_scale)?, mu_f, t, seed, beta_scale, e_scale })
    }

    /// Uses the model exactly as given.
    pub fn from_model(pm: PopulationModel, mu_f: DVector<f64>, t: usize, seed: u64) -> Result<Self> {
        let (beta_scale, e_scale) = (pm.beta_scale(), pm.e_scale());
        if mu_f.len() != pm.k() || t < pm.k() + 2 {
            return Err(Error::InvalidInput("invalid DGP settings".into()));
        }
        Ok(Self { pm, mu_f, t, seed, beta_scale, e_scale })
    }
}

/// Square roots and constants reused across replications.
struct Sampler {
    t: usize,
    mu: DVector<f64>,
    mu_f: DVector<f64>,
    beta: DMatrix<f64>,
    q_root: DMatrix<f64>,
    omega_root: DMatrix<f64>,
}

impl Sampler {
    fn new(spec: &DgpSpec) -> Result<Self> {
        let q_root = cholesky_lower(&symmetrize(&spec.pm.qff), "factor covariance")?.transpose();
        Ok(Self {
            t: spec.t,
            mu: spec.pm.mu_r.clone(),
            mu_f: spec.mu_f.clone(),
            beta: spec.pm.beta.clone(),
            q_root,
            omega_root: sym_power(&symmetrize(&spec.pm.omega), 0.5),
        })
    }

    fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for v in m.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        m
    }

    /// `(returns, factors)`, both `T`-row matrices.
    fn draw(&self, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, k) = self.beta.shape();
        let shocks = Self::normals(rng, self.t, k) * &self.q_root;
        let noise = Self::normals(rng, self.t, n) * &self.omega_root;
        let mut factors = shocks.clone();
        for mut row in factors.row_iter_mut() {
            row += self.mu_f.transpose();
        }
        let mut returns = shocks * self.beta.transpose() + noise;
        for mut row in returns.row_iter_mut() {
            row += self.mu.transpose();
        }
        (returns, factors)
    }
}

/// One dataset drawn with the DGP's own seed, as excess returns.
pub fn generate(spec: &DgpSpec) -> Result<AlignedDataset> {
    let sampler = Sampler::new(spec)?;
    let (r, f) = sampler.draw(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    AlignedDataset::from_matrices(r, f)?.set_zero_beta_mode(ZeroBetaMode::ImposedZero)
}

/// First-pass estimates of replication `rep`.
pub fn generate_rep(spec: &DgpSpec, rep: u64) -> Result<FirstPassEstimates> {
    let sampler = Sampler::new(spec)?;
    let (r, f) = sampler.draw(&mut rep_rng(spec.seed, rep));
    first_pass_from_panels(&r, &f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTest {
    /// FM Wald test with plain standard errors (the squared t-test for one factor).
    FmT,
    /// FM Wald test with Shanken-corrected standard errors.
    ShankenT,
    Drlm,
    /// DRLM plus the power-improvement rule.
    DrlmPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum H0Rule {
    /// Tests zero premia on a design whose pseudo-true value is zero.
    Zero,
    PseudoTrueFm,
    PseudoTrueCue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceCell {
    pub beta_scale: f64,
    pub e_scale: f64,
    pub h0: Option<Vec<f64>>,
    pub rejections: usize,
    /// Replications where the test could be computed.
    pub valid_reps: usize,
    pub failed_reps: usize,
    pub rate: Option<f64>,
    /// `sqrt(r (1 - r) / valid_reps)`.
    pub mc_se: Option<f64>,
    /// Why the cell has no rate, when it has none.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionSurface {
    pub test: SimTest,
    pub h0_rule: H0Rule,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub t: usize,
    pub cells: Vec<SurfaceCell>,
}

impl RejectionSurface {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test,h0_rule,beta_scale,e_scale,rate,mc_se,rejections,valid_reps,failed_reps,flag\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let test = serde_plain(&self.test);
        let rule = serde_plain(&self.h0_rule);
        for c in &self.cells {
            out.push_str(&format!(
                "{test},{rule},{:?},{:?},{},{},{},{},{},{}\n",
                c.beta_scale,
                c.e_scale,
                opt(c.rate),
                opt(c.mc_se),
                c.rejections,
                c.valid_reps,
                c.failed_reps,
                c.flag.clone().unwrap_or_default()
            ));
        }
        out
    }
}

fn serde_plain<T: std::fmt::Debug>(v: &T) -> String {
    // snake_case of the unit variant name
    let name = format!("{v:?}");
    let mut out = String::new();
    for (i, ch) in name.chars().enumerate() {
        if ch.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(ch.to_lowercase());
        } else {
            out.push(ch);
        }
    }
    out
}

/// Cell model and null value under `rule`. `Err(message)` flags the cell.
fn cell_design(base: &DgpSpec, beta_scale: f64, e_scale: f64, test: SimTest, rule: H0Rule) -> std::result::Result<(DgpSpec, Vec<f64>), String> {
    let spec = DgpSpec::new(&base.pm, base.mu_f.clone(), base.t, base.seed, beta_scale, e_scale).map_err(|e| e.to_string())?;
    let pm = &spec.pm;
    match rule {
        H0Rule::PseudoTrueFm => {
            let l = fm_pseudo_true(pm).map_err(|e| format!("FM pseudo-true value undefined: {e}"))?;
            Ok((spec.clone(), l.iter().copied().collect()))
        }
        H0Rule::PseudoTrueCue => {
            let (l, _) = cue_pseudo_true(pm).map_err(|e| format!("CUE pseudo-true value undefined: {e}"))?;
            Ok((spec.clone(), l.iter().copied().collect()))
        }
        H0Rule::Zero => {
            let k = pm.k();
            let model = match test {
                SimTest::FmT | SimTest::ShankenT => {
                    // lambda_F = -(beta'beta)^{-1} beta' e puts the FM pseudo-true value at zero
                    let btb = symmetrize(&(pm.beta.transpose() * &pm.beta));
                    let shift = spd_solve_vec(&btb, &(pm.beta.transpose() * &pm.e_tilde), "beta cross-product")
                        .map_err(|e| format!("zero-premium design undefined: {e}"))?;
                    PopulationModel::new(pm.beta.clone(), -shift, pm.e_tilde.clone(), pm.omega.clone(), pm.qff.clone())
                }
                SimTest::Drlm | SimTest::DrlmPower => {
                    // pricing error Omega^{-1}-orthogonal to beta, zero premia
                    let oinv = spd_inverse(&pm.omega, "residual covariance").map_err(|e| e.to_string())?;
                    let g = symmetrize(&(pm.beta.transpose() * &oinv * &pm.beta));
                    let coef = spd_solve_vec(&g, &(pm.beta.transpose() * &oinv * &pm.e_tilde), "weighted beta cross-product")
                        .map_err(|e| format!("zero-premium design undefined: {e}"))?;
                    let e = &pm.e_tilde - &pm.beta * coef;
                    let norm = e.norm();
                    let e = if norm > 0.0 { e * (e_scale / norm) } else { e };
                    PopulationModel::new(pm.beta.clone(), DVector::zeros(k), e, pm.omega.clone(), pm.qff.clone())
                }
            }
            .map_err(|e| e.to_string())?;
            let check = match test {
                SimTest::FmT | SimTest::ShankenT => fm_pseudo_true(&model).map_err(|e| e.to_string())?,
                _ => cue_pseudo_true(&model).map_err(|e| format!("CUE pseudo-true value undefined: {e}"))?.0,
            };
            if check.amax() > 1e-8 {
                return Err(format!("zero-premium design has pseudo-true value {:?}", check.as_slice()));
            }
            let spec = DgpSpec::from_model(model, base.mu_f.clone(), base.t, base.seed).map_err(|e| e.to_string())?;
            Ok((spec, vec![0.0; k]))
        }
    }
}

/// Outcome of one test on one dataset.
pub fn test_rejects(fp: &FirstPassEstimates, test: SimTest, h0: &[f64], alpha: f64) -> Result<bool> {
    let k = fp.k();
    let h = DVector::from_column_slice(h0);
    match test {
        SimTest::FmT | SimTest::ShankenT => {
            let kind = if test == SimTest::FmT { SeKind::Plain } else { SeKind::Shanken };
            let base = fm_two_pass(fp, ZeroBetaMode::ImposedZero)?;
            let cov = crate::cross_section::fm_covariance(fp, &base, kind)?;
            let d = DVector::from_vec(base.lambda_f) - h;
            let wald = d.dot(&spd_solve_vec(&cov, &d, "premia covariance")?);
            Ok(wald > chisq::critical_value(alpha, k as f64))
        }
        SimTest::Drlm | SimTest::DrlmPower => {
            let ws = DrlmWorkspace::new(fp)?;
            let crit = chisq::critical_value(alpha, k as f64);
            if ws.stat(&h)? > crit {
                return Ok(true);
            }
            if test == SimTest::DrlmPower {
                if let Ok(cue) = cue_estimate(fp, ZeroBetaMode::ImposedZero) {
                    return segment_rejects(&ws, &h, &DVector::from_vec(cue.lambda_f), crit, 100);
                }
            }
            Ok(false)
        }
    }
}

fn run_cell(spec: &DgpSpec, test: SimTest, h0: &[f64], reps: usize, alpha: f64) -> Result<(usize, usize, usize)> {
    let sampler = Sampler::new(spec)?;
    let outcomes: Vec<Option<bool>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (r, f) = sampler.draw(&mut rep_rng(spec.seed, rep));
            first_pass_from_panels(&r, &f).and_then(|fp| test_rejects(&fp, test, h0, alpha)).ok()
        })
        .collect();
    let rejections = outcomes.iter().filter(|o| **o == Some(true)).count();
    let valid = outcomes.iter().filter(|o| o.is_some()).count();
    Ok((rejections, valid, reps - valid))
}

/// Rejection frequencies of `test` over `(beta_scale, e_scale)` cells.
pub fn rejection_surface(
    base: &DgpSpec,
    grid: &[(f64, f64)],
    test: SimTest,
    h0_rule: H0Rule,
    reps: usize,
    alpha: f64,
) -> Result<RejectionSurface> {
    if reps < 100 {
        return Err(Error::InvalidInput(format!("rejection surfaces need at least 100 replications, got {reps}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for &(beta_scale, e_scale) in grid {
        let mut cell = SurfaceCell {
            beta_scale,
            e_scale,
            h0: None,
            rejections: 0,
            valid_reps: 0,
            failed_reps: 0,
            rate: None,
            mc_se: None,
            flag: None,
        };
        match cell_design(base, beta_scale, e_scale, test, h0_rule) {
            Err(msg) => {
                log::warn!("cell ({beta_scale}, {e_scale}) flagged: {msg}");
                cell.flag = Some(msg);
            }
            Ok((spec, h0)) => {
                let (rej, valid, failed) = run_cell(&spec, test, &h0, reps, alpha)?;
                cell.h0 = Some(h0);
                cell.rejections = rej;
                cell.valid_reps = valid;
                cell.failed_reps = failed;
                if valid > 0 {
                    let r = rej as f64 / valid as f64;
                    cell.rate = Some(r);
                    cell.mc_se = Some((r * (1.0 - r) / valid as f64).sqrt());
                } else {
                    cell.flag = Some("no replication produced a test statistic".into());
                }
            }
        }
        cells.push(cell);
    }
    Ok(RejectionSurface { test, h0_rule, reps, alpha, seed: base.seed, t: base.t, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerPoint {
    pub offset: f64,
    pub rate: Option<f64>,
    pub mc_se: Option<f64>,
}

/// Rejection frequency of `H0: lambda = lambda* + offset * 1` where
/// `lambda*` is the pseudo-true value matching the test (FM or CUE).
pub fn power_curve(spec: &DgpSpec, test: SimTest, offsets: &[f64], reps: usize, alpha: f64) -> Result<Vec<PowerPoint>> {
    let center = match test {
        SimTest::FmT | SimTest::ShankenT => fm_pseudo_true(&spec.pm)?,
        _ => cue_pseudo_true(&spec.pm)?.0,
    };
    offsets
        .iter()
        .map(|&off| {
            let h0: Vec<f64> = center.iter().map(|c| c + off).collect();
            let (rej, valid, _) = run_cell(spec, test, &h0, reps, alpha)?;
            let rate = (valid > 0).then(|| rej as f64 / valid as f64);
            let mc_se = rate.map(|r| (r * (1.0 - r) / valid as f64).sqrt());
            Ok(PowerPoint { offset: off, rate, mc_se })
        })
        .collect()
}

/// Deviation of the FM and CUE pseudo-true values from the baseline premia.
/// Rows follow `e_scales`, columns `beta_scales`; `None` marks cells where
/// the pseudo-true value does not exist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourSurface {
    pub beta_scales: Vec<f64>,
    pub e_scales: Vec<f64>,
    pub fm: Vec<Vec<Option<f64>>>,
    pub cue: Vec<Vec<Option<f64>>>,
}

impl ContourSurface {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta_scale,e_scale,fm_deviation,cue_deviation\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for (i, e) in self.e_scales.iter().enumerate() {
            for (j, b) in self.beta_scales.iter().enumerate() {
                out.push_str(&format!("{b:?},{e:?},{},{}\n", opt(self.fm[i][j]), opt(self.cue[i][j])));
            }
        }
        out
    }
}

pub fn pseudo_true_contours(base: &PopulationModel, beta_scales: &[f64], e_scales: &[f64]) -> Result<ContourSurface> {
    if beta_scales.iter().chain(e_scales).any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidInput("scales must be non-negative".into()));
    }
    let mut fm = Vec::with_capacity(e_scales.len());
    let mut cue = Vec::with_capacity(e_scales.len());
    for &e in e_scales {
        let mut fm_row = Vec::with_capacity(beta_scales.len());
        let mut cue_row = Vec::with_capacity(beta_scales.len());
        for &b in beta_scales {
            let pm = base.rescaled(b, e)?;
            fm_row.push(fm_pseudo_true(&pm).ok().map(|l| (l - &pm.lambda_f).norm()));
            cue_row.push(cue_pseudo_true(&pm).ok().map(|(l, _)| (l - &pm.lambda_f).norm()));
        }
        fm.push(fm_row);
        cue.push(cue_row);
    }
    Ok(ContourSurface { beta_scales: beta_scales.to_vec(), e_scales: e_scales.to_vec(), fm, cue })
}

/// Mean and standard error of one component across draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentStats {
    pub mean: f64,
    pub se: f64,
    pub max_abs: f64,
}

impl ComponentStats {
    fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, se: (var / n).sqrt(), max_abs: x.iter().fold(0.0, |m, v| m.max(v.abs())) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Summary {
    pub t: usize,
    pub reps: usize,
    /// FM pseudo-true value `lambda_F + (b'b)^{-1} b'a`.
    pub lambda_star: f64,
    pub component2: ComponentStats,
    pub component3: ComponentStats,
    pub component4: ComponentStats,
    pub limit_sum: ComponentStats,
    pub direct: ComponentStats,
    /// Two-sample Kolmogorov-Smirnov distance between the limit draws and
    /// simulated FM estimates.
    pub ks_distance: f64,
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Limit draws `(component2, component3, component4)` of the FM estimator
/// with `beta = b / sqrt(T)` and `mu_R - beta lambda_F = a / sqrt(T)`.
fn limit_draw(
    rng: &mut ChaCha8Rng,
    b: &DVector<f64>,
    e: &DVector<f64>,
    lambda_star: f64,
    mu_root: &DMatrix<f64>,
    beta_root: &DMatrix<f64>,
) -> (f64, f64, f64) {
    let n = b.len();
    let z1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z2 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let psi_mu = mu_root * z1;
    let psi_beta = beta_root * z2;
    let bb = b + &psi_beta;
    let den = bb.norm_squared();
    (psi_mu.dot(&bb) / den, -lambda_star * psi_beta.dot(&bb) / den, e.dot(&psi_beta) / den)
}

/// Compares the four-component limit of the one-factor FM estimator with
/// direct simulation. The DGP's scales are read as `beta = b / sqrt(T)` and
/// `e_tilde = a / sqrt(T)`.
pub fn theorem2_decomposition(spec: &DgpSpec, reps: usize) -> Result<Theorem2Summary> {
    let pm = &spec.pm;
    if pm.k() != 1 {
        return Err(Error::InvalidInput(format!("the decomposition is for one factor, got {}", pm.k())));
    }
    if reps < 2 {
        return Err(Error::InvalidInput("need at least 2 replications".into()));
    }
    let rt = (spec.t as f64).sqrt();
    let b = pm.beta.column(0) * rt;
    let a = &pm.e_tilde * rt;
    let lambda_star = pm.lambda_f[0] + b.dot(&a) / b.norm_squared();
    let e = &a - &b * (b.dot(&a) / b.norm_squared());
    let q = pm.qff[(0, 0)];
    let var_mu = symmetrize(&(&pm.omega + &pm.beta * pm.beta.transpose() * q));
    let mu_root = sym_power(&var_mu, 0.5);
    let beta_root = sym_power(&(&pm.omega / q), 0.5);

    let sampler = Sampler::new(spec)?;
    let direct: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (r, f) = sampler.draw(&mut rep_rng(spec.seed, rep));
            let fp = first_pass_from_panels(&r, &f)?;
            Ok(fm_two_pass(&fp, ZeroBetaMode::ImposedZero)?.lambda_f[0])
        })
        .collect::<Result<_>>()?;
    // the limit draws use a disjoint stream family
    let limit_seed = splitmix64(spec.seed ^ 0xA5A5_A5A5_A5A5_A5A5);
    let comps: Vec<(f64, f64, f64)> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| limit_draw(&mut rep_rng(limit_seed, rep), &b, &e, lambda_star, &mu_root, &beta_root))
        .collect();
    let c2: Vec<f64> = comps.iter().map(|c| c.0).collect();
    let c3: Vec<f64> = comps.iter().map(|c| c.1).collect();
    let c4: Vec<f64> = comps.iter().map(|c| c.2).collect();
    let sum: Vec<f64> = comps.iter().map(|c| lambda_star + c.0 + c.1 + c.2).collect();
    Ok(Theorem2Summary {
        t: spec.t,
        reps,
        lambda_star,
        component2: ComponentStats::of(&c2),
        component3: ComponentStats::of(&c3),
        component4: ComponentStats::of(&c4),
        limit_sum: ComponentStats::of(&sum),
        direct: ComponentStats::of(&direct),
        ks_distance: ks_two_sample(&sum, &direct),
    })
}

/// Population model with drifting `beta = b / sqrt(T)` and pricing error
/// `a / sqrt(T)`.
pub fn local_model(b: &DVector<f64>, a: &DVector<f64>, lambda_f: f64, omega: DMatrix<f64>, q: f64, t: usize) -> Result<PopulationModel> {
    let rt = (t as f64).sqrt();
    PopulationModel::new(
        DMatrix::from_column_slice(b.len(), 1, (b / rt).as_slice()),
        DVector::from_element(1, lambda_f),
        a / rt,
        omega,
        DMatrix::from_element(1, 1, q),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_section::fm_tstats;

    fn base_spec(t: usize, seed: u64) -> DgpSpec {
        let pm = synthetic_model(6, 1).unwrap();
        DgpSpec::new(&pm, DVector::from_element(1, 0.5), t, seed, 3.0, 0.5).unwrap()
    }

    #[test]
    fn splitmix_is_a_bijection_sample() {
        let xs: std::collections::HashSet<u64> = (0..1000).map(splitmix64).collect();
        assert_eq!(xs.len(), 1000);
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = base_spec(50, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DgpSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().returns, generate(&other).unwrap().returns);
    }

    #[test]
    fn noiseless_dgp_is_recovered_exactly() {
        let pm = synthetic_model(5, 2).unwrap();
        let pm = PopulationModel::new(pm.beta.clone(), pm.lambda_f.clone(), DVector::zeros(5), DMatrix::zeros(5, 5), pm.qff.clone()).unwrap();
        let spec = DgpSpec::from_model(pm.clone(), DVector::zeros(2), 40, 1).unwrap();
        let ds = generate(&spec).unwrap();
        let fp = crate::first_pass::estimate_first_pass(&ds).unwrap();
        assert!((&fp.beta_hat - &pm.beta).amax() < 1e-10);
        assert!(fp.omega_hat.amax() < 1e-20);
        // average returns lie exactly in the span of beta
        let fm = fm_two_pass(&fp, ZeroBetaMode::ImposedZero).unwrap();
        let resid = &fp.mu_hat - &fp.beta_hat * DVector::from_vec(fm.lambda_f);
        assert!(resid.amax() < 1e-10);
        let (j, _) = crate::cue_rank::j_statistic(&fp, ZeroBetaMode::ImposedZero).unwrap();
        assert!(j.abs() < 1e-8);
    }

    #[test]
    fn sample_moments_converge() {
        let spec = base_spec(100_000, 7);
        let fp = generate_rep(&spec, 0).unwrap();
        let rel = (&fp.omega_hat - &spec.pm.omega).norm() / spec.pm.omega.norm();
        assert!(rel <= 0.05, "{rel}");
        let fm = fm_two_pass(&fp, ZeroBetaMode::ImposedZero).unwrap();
        let se = fm_tstats(&fp, &fm, SeKind::Shanken).unwrap().std_errors.unwrap()[0];
        let target = fm_pseudo_true(&spec.pm).unwrap()[0];
        assert!((fm.lambda_f[0] - target).abs() <= 3.0 * se, "{} vs {target} (se {se})", fm.lambda_f[0]);
    }

    #[test]
    fn calibrate_uses_residual_direction() {
        let spec = base_spec(300, 3);
        let fp = generate_rep(&spec, 0).unwrap();
        let pm = calibrate(&fp, DVector::from_element(1, 2.0), EDirection::Residual).unwrap();
        assert!((pm.beta_scale() - fp.beta_hat.norm()).abs() < 1e-12);
        assert_eq!(pm.omega, fp.omega_hat);

        let mut exact = fp.clone();
        exact.mu_hat = &exact.beta_hat * DVector::from_element(1, 1.0);
        assert!(calibrate(&exact, DVector::from_element(1, 2.0), EDirection::Residual).is_err());

        // a direction orthogonal to beta leaves the FM pseudo-true value alone
        let b = fp.beta_hat.column(0).into_owned();
        let mut a = DVector::from_fn(fp.n(), |i, _| (i as f64).sin() + 0.3);
        a -= &b * (b.dot(&a) / b.norm_squared());
        let pm = calibrate(&fp, DVector::from_element(1, 2.0), EDirection::Custom(a)).unwrap();
        for (bs, es) in [(0.5, 3.0), (2.0, 0.1), (1.0, 10.0)] {
            let l = fm_pseudo_true(&pm.rescaled(bs, es).unwrap()).unwrap()[0];
            assert!((l - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn contours_zero_row_and_closed_form() {
        let base = synthetic_model(6, 1).unwrap();
        let bs = [0.5, 1.0, 2.0, 4.0];
        let es = [0.0, 1.0, 3.0];
        let c = pseudo_true_contours(&base, &bs, &es).unwrap();
        for j in 0..bs.len() {
            assert!(c.fm[0][j].unwrap() < 1e-12);
            assert!(c.cue[0][j].unwrap() < 1e-9);
        }
        let b = base.beta.column(0) / base.beta_scale();
        let a = &base.e_tilde / base.e_scale();
        let coef = (b.dot(&a) / b.norm_squared()).abs();
        for (i, e) in es.iter().enumerate() {
            for (j, bsc) in bs.iter().enumerate() {
                let expect = e / bsc * coef;
                assert!((c.fm[i][j].unwrap() - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_beta_scale_marks_cells() {
        let base = synthetic_model(6, 1).unwrap();
        let c = pseudo_true_contours(&base, &[0.0], &[1.0]).unwrap();
        assert!(c.fm[0][0].is_none());
        assert!(c.cue[0][0].is_none());
    }

    #[test]
    fn ks_statistic_known_values() {
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[2.5, 3.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn surface_is_reproducible_and_flags_cells() {
        let spec = base_spec(120, 11);
        let grid = [(3.0, 0.0), (0.0, 1.0)];
        let s1 = rejection_surface(&spec, &grid, SimTest::Drlm, H0Rule::PseudoTrueCue, 100, 0.05).unwrap();
        let s2 = rejection_surface(&spec, &grid, SimTest::Drlm, H0Rule::PseudoTrueCue, 100, 0.05).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.cells[0].rate.is_some());
        assert!(s1.cells[1].flag.is_some() && s1.cells[1].rate.is_none());
        for c in &s1.cells {
            if let Some(r) = c.rate {
                assert!((0.0..=1.0).contains(&r));
            }
        }
        assert!(rejection_surface(&spec, &grid, SimTest::Drlm, H0Rule::PseudoTrueCue, 50, 0.05).is_err());
    }

    #[test]
    fn zero_rule_designs_have_zero_pseudo_true() {
        let spec = base_spec(100, 1);
        for test in [SimTest::FmT, SimTest::Drlm] {
            let (cell, h0) = cell_design(&spec, 2.0, 0.3, test, H0Rule::Zero).unwrap();
            assert_eq!(h0, vec![0.0]);
            match test {
                SimTest::FmT => assert!(fm_pseudo_true(&cell.pm).unwrap()[0].abs() < 1e-10),
                _ => assert!(cue_pseudo_true(&cell.pm).unwrap().0[0].abs() < 1e-10),
            }
        }
    }

    #[test]
    fn component_four_vanishes_without_misspecification() {
        let b = DVector::from_fn(5, |i, _| 1.0 + 0.2 * i as f64);
        let pm = local_model(&b, &DVector::zeros(5), 2.0, DMatrix::identity(5, 5), 1.0, 1000).unwrap();
        let spec = DgpSpec::from_model(pm, DVector::zeros(1), 1000, 5).unwrap();
        let s = theorem2_decomposition(&spec, 200).unwrap();
        assert_eq!(s.component4.max_abs, 0.0);
        assert!((s.lambda_star - 2.0).abs() < 1e-12);
    }
}
