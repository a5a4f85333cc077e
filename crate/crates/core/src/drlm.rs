//! Double robust LM statistic (i.i.d. form), grid-inverted confidence sets,
//! the power-improvement rule and per-premium projections.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::chisq;
use crate::cross_section::{fm_tstats, fm_two_pass, SeKind};
use crate::cue_rank::{cue_estimate, effective_estimates, omega_factor};
use crate::first_pass::FirstPassEstimates;
use crate::linalg::{cholesky_lower, forward_solve, spd_inverse, spd_solve, sym_power, symmetrize};
use crate::panel_io::ZeroBetaMode;
use crate::{Error, Result};

/// Choice of matrix square roots in the literal evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    /// Symmetric eigen-based roots.
    Symmetric,
    /// Cholesky factors.
    Cholesky,
}

/// Precomputed pieces of the DRLM statistic for one set of estimates.
///
/// With `Omega = L L'`, `w = L^{-1} Rbar` and `B = L^{-1} beta`, the statistic
/// at `l` only needs the `K x K` products `B'B`, `B'w` and `w'w`:
///
/// `DRLM(l) = T/(1+c) g' [ (r'r/(1+c)) (Q + l l') + G'G ]^{-1} g`
///
/// where `c = l'Q^{-1}l`, `r = w - B l`, `G = B Q + w l'` and `g = G'r`.
#[derive(Debug, Clone)]
pub struct DrlmWorkspace {
    t: f64,
    mu: DVector<f64>,
    beta: DMatrix<f64>,
    omega: DMatrix<f64>,
    q: DMatrix<f64>,
    qinv: DMatrix<f64>,
    btb: DMatrix<f64>,
    btw: DVector<f64>,
    wtw: f64,
    qbtbq: DMatrix<f64>,
    qbtw: DVector<f64>,
}

impl DrlmWorkspace {
    /// `fp` must already carry the zero-beta handling (see
    /// [`effective_estimates`]).
    pub fn new(fp: &FirstPassEstimates) -> Result<Self> {
        let l = omega_factor(&fp.omega_hat)?;
        let w = forward_solve(&l, &DMatrix::from_column_slice(fp.n(), 1, fp.mu_hat.as_slice()))?.column(0).into_owned();
        let b = forward_solve(&l, &fp.beta_hat)?;
        let q = fp.qff_hat.clone();
        let btb = symmetrize(&(b.transpose() * &b));
        let btw = b.transpose() * &w;
        Ok(Self {
            t: fp.t as f64,
            mu: fp.mu_hat.clone(),
            beta: fp.beta_hat.clone(),
            omega: fp.omega_hat.clone(),
            qinv: spd_inverse(&q, "factor covariance")?,
            qbtbq: symmetrize(&(&q * &btb * &q)),
            qbtw: &q * &btw,
            wtw: w.norm_squared(),
            btb,
            btw,
            q,
        })
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    fn check(&self, l: &DVector<f64>) -> Result<()> {
        if l.len() != self.k() || l.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("hypothesized premia must be {} finite values", self.k())));
        }
        Ok(())
    }

    /// Statistic through the `K x K` reduction.
    pub fn stat(&self, l: &DVector<f64>) -> Result<f64> {
        self.check(l)?;
        let c = (l.transpose() * &self.qinv * l)[(0, 0)];
        let btl = &self.btb * l;
        let btw_l = self.btw.dot(l);
        let b_r = &self.btw - &btl;
        let w_r = self.wtw - btw_l;
        let rr = self.wtw - 2.0 * btw_l + l.dot(&btl);
        let g = &self.q * b_r + l * w_r;
        if g.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let gtg = &self.qbtbq + &self.qbtw * l.transpose() + l * self.qbtw.transpose() + (l * l.transpose()) * self.wtw;
        let m = &self.q + l * l.transpose();
        let bracket = symmetrize(&(m * (rr.max(0.0) / (1.0 + c)) + gtg));
        let x = spd_solve(&bracket, &DMatrix::from_column_slice(g.len(), 1, g.as_slice()), "DRLM bracket")?;
        Ok((self.t / (1.0 + c) * g.dot(&x.column(0))).max(0.0))
    }

    /// `D(l) = -(beta Q + Rbar l')(Q + l l')^{-1}`.
    pub fn d_hat(&self, l: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = &self.q + l * l.transpose();
        let lhs = &self.beta * &self.q + &self.mu * l.transpose();
        let sol = spd_solve(&m, &lhs.transpose(), "inner factor moment")?;
        Ok(-sol.transpose())
    }

    /// `P` with `P'P = Omega^{-1}`.
    fn omega_root_inv(&self, root: RootKind) -> Result<DMatrix<f64>> {
        match root {
            RootKind::Symmetric => Ok(sym_power(&self.omega, -0.5)),
            RootKind::Cholesky => {
                let l = cholesky_lower(&self.omega, "residual covariance")?;
                forward_solve(&l, &DMatrix::identity(self.omega.nrows(), self.omega.nrows()))
            }
        }
    }

    /// `R` with `R'R = Q + l l'`.
    fn moment_root(&self, l: &DVector<f64>, root: RootKind) -> Result<DMatrix<f64>> {
        let m = symmetrize(&(&self.q + l * l.transpose()));
        match root {
            RootKind::Symmetric => Ok(sym_power(&m, 0.5)),
            RootKind::Cholesky => Ok(cholesky_lower(&m, "inner factor moment")?.transpose()),
        }
    }

    /// `sqrt(T) Omega^{-1/2} (Rbar - beta l) / sqrt(1 + l'Q^{-1}l)`.
    pub fn mu_star(&self, l: &DVector<f64>, root: RootKind) -> Result<DVector<f64>> {
        self.check(l)?;
        let c = (l.transpose() * &self.qinv * l)[(0, 0)];
        let p = self.omega_root_inv(root)?;
        Ok(p * (&self.mu - &self.beta * l) * (self.t / (1.0 + c)).sqrt())
    }

    /// `sqrt(T) Omega^{-1/2} D(l) (Q + l l')^{1/2}`.
    pub fn d_star(&self, l: &DVector<f64>, root: RootKind) -> Result<DMatrix<f64>> {
        self.check(l)?;
        let p = self.omega_root_inv(root)?;
        let r = self.moment_root(l, root)?;
        Ok(p * self.d_hat(l)? * r.transpose() * self.t.sqrt())
    }

    /// Statistic assembled from `mu_star` and `d_star` as written.
    pub fn literal(&self, l: &DVector<f64>, root: RootKind) -> Result<f64> {
        let mu = self.mu_star(l, root)?;
        let d = self.d_star(l, root)?;
        let dm = d.transpose() * &mu;
        let bracket = DMatrix::identity(self.k(), self.k()) * mu.norm_squared() + d.transpose() * &d;
        let x = spd_solve(&symmetrize(&bracket), &DMatrix::from_column_slice(dm.len(), 1, dm.as_slice()), "DRLM bracket")?;
        Ok(dm.dot(&x.column(0)))
    }
}

/// DRLM statistic at the hypothesized factor premia `l`.
pub fn drlm_stat(fp: &FirstPassEstimates, mode: ZeroBetaMode, l: &[f64]) -> Result<f64> {
    let eff = effective_estimates(fp, mode)?;
    DrlmWorkspace::new(&eff)?.stat(&DVector::from_column_slice(l))
}

/// True when some of the `samples` equally spaced interior points of the
/// segment from `l` to `cue` is significant.
pub fn segment_rejects(ws: &DrlmWorkspace, l: &DVector<f64>, cue: &DVector<f64>, critical: f64, samples: usize) -> Result<bool> {
    let step = cue - l;
    for j in 1..=samples {
        let p = l + &step * (j as f64 / (samples + 1) as f64);
        if ws.stat(&p)? > critical {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    BoundedConvex,
    BoundedDisjoint,
    UnboundedConvex,
    UnboundedDisjoint,
    Empty,
}

/// DRLM values over a Cartesian grid of hypothesized premia. Flattened
/// arrays are row-major with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsGrid {
    pub axes: Vec<Vec<f64>>,
    pub drlm_values: Vec<f64>,
    pub reject_raw: Vec<bool>,
    pub reject_final: Vec<bool>,
    pub alpha: f64,
    pub critical_value: f64,
    pub cue_point: Option<Vec<f64>>,
    pub shape_class: ShapeClass,
    pub power_rule_applied: bool,
    /// Set when the power rule was requested but no finite CUE exists.
    pub power_rule_disabled: bool,
}

/// A maximal run of accepted values along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lower_censored: bool,
    pub upper_censored: bool,
}

impl CsGrid {
    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.drlm_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drlm_values.is_empty()
    }

    /// Per-axis indices of a flat position.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut idx = vec![0; dims.len()];
        for a in (0..dims.len()).rev() {
            idx[a] = flat % dims[a];
            flat /= dims[a];
        }
        idx
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.unflatten(flat).iter().enumerate().map(|(a, &i)| self.axes[a][i]).collect()
    }

    pub fn accepted_count(&self) -> usize {
        self.reject_final.iter().filter(|r| !**r).count()
    }

    /// Long-form CSV: coordinates, DRLM, raw and final rejection.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::new();
        for n in names {
            out.push_str(n);
            out.push(',');
        }
        out.push_str("drlm,reject_raw,reject_final\n");
        for i in 0..self.len() {
            for v in self.point(i) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{:?},{},{}\n", self.drlm_values[i], self.reject_raw[i], self.reject_final[i]));
        }
        out
    }
}

fn validate_axes(axes: &[Vec<f64>], k: usize, alpha: f64) -> Result<()> {
    if axes.len() != k {
        return Err(Error::InvalidInput(format!("grid has {} axes, model has {k} factors", axes.len())));
    }
    for (a, ax) in axes.iter().enumerate() {
        if ax.len() < 2 {
            return Err(Error::InvalidInput(format!("grid axis {a} needs at least 2 points")));
        }
        if ax.windows(2).any(|w| !(w[1] > w[0])) || ax.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("grid axis {a} must be finite and strictly increasing")));
        }
    }
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 0.5], got {alpha}")));
    }
    Ok(())
}

/// Settings for [`confidence_set_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsOptions {
    pub alpha: f64,
    pub power_rule: bool,
    /// Interior points sampled per segment by the power rule.
    pub segment_samples: usize,
}

impl Default for CsOptions {
    fn default() -> Self {
        Self { alpha: 0.05, power_rule: true, segment_samples: 100 }
    }
}

/// Confidence set with the power-improvement rule and 100 segment samples.
pub fn confidence_set(fp: &FirstPassEstimates, mode: ZeroBetaMode, axes: &[Vec<f64>], alpha: f64) -> Result<CsGrid> {
    confidence_set_with(fp, mode, axes, &CsOptions { alpha, ..CsOptions::default() })
}

pub fn confidence_set_with(fp: &FirstPassEstimates, mode: ZeroBetaMode, axes: &[Vec<f64>], opts: &CsOptions) -> Result<CsGrid> {
    validate_axes(axes, fp.k(), opts.alpha)?;
    let eff = effective_estimates(fp, mode)?;
    let ws = DrlmWorkspace::new(&eff)?;
    let critical = chisq::critical_value(opts.alpha, fp.k() as f64);
    let mut grid = CsGrid {
        axes: axes.to_vec(),
        drlm_values: Vec::new(),
        reject_raw: Vec::new(),
        reject_final: Vec::new(),
        alpha: opts.alpha,
        critical_value: critical,
        cue_point: cue_estimate(fp, mode).ok().map(|r| r.lambda_f),
        shape_class: ShapeClass::Empty,
        power_rule_applied: false,
        power_rule_disabled: false,
    };
    let total: usize = axes.iter().map(Vec::len).product();
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| ws.stat(&DVector::from_vec(grid.point(i))))
        .collect::<Result<_>>()?;
    grid.reject_raw = values.iter().map(|v| *v > critical).collect();
    grid.reject_final = grid.reject_raw.clone();
    grid.drlm_values = values;
    if opts.power_rule {
        grid = apply_power_rule(&ws, grid, opts.segment_samples)?;
    }
    grid.shape_class = classify(&grid);
    Ok(grid)
}

/// Additionally rejects every accepted point whose segment to the CUE
/// crosses a significant DRLM value. Without a finite CUE the grid is
/// returned unchanged with `power_rule_disabled` set.
pub fn power_improvement(fp: &FirstPassEstimates, mode: ZeroBetaMode, grid: CsGrid, samples: usize) -> Result<CsGrid> {
    let eff = effective_estimates(fp, mode)?;
    let ws = DrlmWorkspace::new(&eff)?;
    let mut grid = apply_power_rule(&ws, grid, samples)?;
    grid.shape_class = classify(&grid);
    Ok(grid)
}

fn apply_power_rule(ws: &DrlmWorkspace, mut grid: CsGrid, samples: usize) -> Result<CsGrid> {
    let Some(cue) = grid.cue_point.clone().filter(|c| c.iter().all(|v| v.is_finite())) else {
        log::warn!("power-improvement rule disabled: no finite CUE");
        grid.power_rule_disabled = true;
        return Ok(grid);
    };
    let cue = DVector::from_vec(cue);
    let critical = grid.critical_value;
    let extra: Vec<bool> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if grid.reject_final[i] {
                return Ok(true);
            }
            segment_rejects(ws, &DVector::from_vec(grid.point(i)), &cue, critical, samples)
        })
        .collect::<Result<_>>()?;
    grid.reject_final = extra;
    grid.power_rule_applied = true;
    Ok(grid)
}

/// Boundary contact and axis-neighbour connectivity of the accepted set.
fn classify(grid: &CsGrid) -> ShapeClass {
    let dims = grid.dims();
    let accepted: Vec<bool> = grid.reject_final.iter().map(|r| !r).collect();
    let Some(start) = accepted.iter().position(|a| *a) else {
        return ShapeClass::Empty;
    };
    let touches = (0..grid.len())
        .filter(|&i| accepted[i])
        .any(|i| grid.unflatten(i).iter().zip(&dims).any(|(&x, &d)| x == 0 || x + 1 == d));

    let mut strides = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    let mut seen = vec![false; grid.len()];
    let mut components = 0;
    for s in start..grid.len() {
        if !accepted[s] || seen[s] {
            continue;
        }
        components += 1;
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            let idx = grid.unflatten(i);
            for a in 0..dims.len() {
                let mut push = |j: usize| {
                    if accepted[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if idx[a] > 0 {
                    push(i - strides[a]);
                }
                if idx[a] + 1 < dims[a] {
                    push(i + strides[a]);
                }
            }
        }
    }
    match (touches, components == 1) {
        (true, true) => ShapeClass::UnboundedConvex,
        (true, false) => ShapeClass::UnboundedDisjoint,
        (false, true) => ShapeClass::BoundedConvex,
        (false, false) => ShapeClass::BoundedDisjoint,
    }
}

/// Projection of the accepted set onto one axis as maximal runs of
/// accepted grid values.
pub fn project(grid: &CsGrid, axis: usize) -> Result<Vec<Interval>> {
    let Some(values) = grid.axes.get(axis) else {
        return Err(Error::InvalidInput(format!("axis {axis} out of range for {} axes", grid.axes.len())));
    };
    let mut hit = vec![false; values.len()];
    for i in 0..grid.len() {
        if !grid.reject_final[i] {
            hit[grid.unflatten(i)[axis]] = true;
        }
    }
    let last = values.len() - 1;
    let mut out = Vec::new();
    let mut i = 0;
    while i <= last {
        if !hit[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < last && hit[i + 1] {
            i += 1;
        }
        out.push(Interval { lo: values[s], hi: values[i], lower_censored: s == 0, upper_censored: i == last });
        i += 1;
    }
    Ok(out)
}

/// Evenly spaced axis from `lo` to `hi` inclusive.
pub fn axis_range(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("invalid grid range {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Parses `"lo:hi:step,lo:hi:step,..."`, one range per factor.
pub fn parse_grid(spec: &str) -> Result<Vec<Vec<f64>>> {
    spec.split(',')
        .map(|part| {
            let nums: Vec<f64> = part
                .split(':')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("grid range '{part}': {e}")))?;
            match nums[..] {
                [lo, hi, step] => axis_range(lo, hi, step),
                _ => Err(Error::InvalidInput(format!("grid range '{part}' must be lo:hi:step"))),
            }
        })
        .collect()
}

/// Axes centred on the FM estimate with half-width `max(5, 10 se)` and
/// step 0.05.
pub fn default_axes(fp: &FirstPassEstimates, mode: ZeroBetaMode) -> Result<Vec<Vec<f64>>> {
    let fm = fm_tstats(fp, &fm_two_pass(fp, mode)?, SeKind::Plain)?;
    let se = fm.std_errors.unwrap_or_default();
    let off = usize::from(fm.lambda_0.is_some());
    fm.lambda_f
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let half = (10.0 * se[i + off]).max(5.0);
            axis_range(c - half, c + half, 0.05)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::first_pass::first_pass_from_panels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panels(t: usize, n: usize, k: usize, misspec: f64, beta_scale: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.2..1.5) * beta_scale);
        let e = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * misspec);
        let f = DMatrix::from_fn(t, k, |_, _| rng.random_range(-2.0..2.0));
        let r = DMatrix::from_fn(t, n, |i, j| {
            let mut v = 0.5 + e[j] + rng.random_range(-1.0..1.0);
            for c in 0..k {
                v += beta[(j, c)] * f[(i, c)];
            }
            v
        });
        (r, f)
    }

    fn synthetic(t: usize, n: usize, k: usize, misspec: f64, seed: u64) -> FirstPassEstimates {
        let (r, f) = panels(t, n, k, misspec, 1.0, seed);
        first_pass_from_panels(&r, &f).unwrap()
    }

    #[test]
    fn fast_route_matches_literal_with_both_roots() {
        for seed in 0..20 {
            let k = 1 + (seed % 3) as usize;
            let fp = synthetic(120, 7, k, 0.4, seed);
            let ws = DrlmWorkspace::new(&fp).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let l = DVector::from_fn(k, |_, _| rng.random_range(-3.0..3.0));
            let fast = ws.stat(&l).unwrap();
            let sym = ws.literal(&l, RootKind::Symmetric).unwrap();
            let chol = ws.literal(&l, RootKind::Cholesky).unwrap();
            let tol = 1e-10 * fast.max(1.0);
            assert!((fast - sym).abs() < tol, "{fast} {sym}");
            assert!((sym - chol).abs() < tol, "{sym} {chol}");
        }
    }

    #[test]
    fn d_hat_matches_raw_data_definition() {
        let (r, f) = panels(80, 5, 2, 0.2, 1.0, 3);
        let fp = first_pass_from_panels(&r, &f).unwrap();
        let ws = DrlmWorkspace::new(&fp).unwrap();
        let l = DVector::from_column_slice(&[0.7, -1.2]);
        let t = r.nrows();
        let fbar = crate::linalg::column_means(&f);
        let mut cross = DMatrix::zeros(5, 2);
        let mut inner = DMatrix::zeros(2, 2);
        for i in 0..t {
            let fl = f.row(i).transpose() - &fbar + &l;
            cross += r.row(i).transpose() * fl.transpose();
            inner += &fl * fl.transpose();
        }
        let expect = -(cross / t as f64) * (inner / t as f64).try_inverse().unwrap();
        assert!((ws.d_hat(&l).unwrap() - expect).norm() < 1e-10);
    }

    #[test]
    fn zero_at_cue_and_at_exact_pricing() {
        for seed in 0..10 {
            let fp = synthetic(200, 8, 2, 0.5, seed);
            let cue = cue_estimate(&fp, ZeroBetaMode::ImposedZero).unwrap();
            let d = drlm_stat(&fp, ZeroBetaMode::ImposedZero, &cue.lambda_f).unwrap();
            assert!(d <= 1e-8, "seed {seed}: {d}");
        }
        let mut fp = synthetic(200, 8, 2, 0.0, 1);
        fp.mu_hat = &fp.beta_hat * DVector::from_column_slice(&[0.4, 0.9]);
        assert!(drlm_stat(&fp, ZeroBetaMode::ImposedZero, &[0.4, 0.9]).unwrap() < 1e-12);
    }

    #[test]
    fn bounded_by_chi_square_support() {
        // The statistic is a quadratic form normalised so it never exceeds
        // T-scaled mu*'mu*, and is non-negative.
        let fp = synthetic(100, 6, 2, 0.8, 5);
        let ws = DrlmWorkspace::new(&fp).unwrap();
        for x in [-4.0, -1.0, 0.0, 2.5] {
            let l = DVector::from_column_slice(&[x, 1.0 - x]);
            let s = ws.stat(&l).unwrap();
            let mu = ws.mu_star(&l, RootKind::Cholesky).unwrap();
            assert!(s >= 0.0 && s <= mu.norm_squared() + 1e-9);
        }
    }

    #[test]
    fn one_factor_set_is_interval_around_cue() {
        let fp = synthetic(500, 10, 1, 0.0, 7);
        let cue = cue_estimate(&fp, ZeroBetaMode::ImposedZero).unwrap().lambda_f[0];
        let axes = vec![axis_range(cue - 2.0, cue + 2.0, 0.01).unwrap()];
        let opts = CsOptions { power_rule: false, ..CsOptions::default() };
        let grid = confidence_set_with(&fp, ZeroBetaMode::ImposedZero, &axes, &opts).unwrap();
        let crit = chisq::critical_value(0.05, 1.0);
        for (i, x) in axes[0].iter().enumerate() {
            let direct = drlm_stat(&fp, ZeroBetaMode::ImposedZero, &[*x]).unwrap();
            assert_eq!(grid.drlm_values[i], direct);
            assert_eq!(grid.reject_raw[i], direct > crit);
        }
        let proj = project(&grid, 0).unwrap();
        assert_eq!(proj.len(), 1);
        assert!(proj[0].lo < cue && cue < proj[0].hi);
        assert_eq!(grid.shape_class, ShapeClass::BoundedConvex);
    }

    #[test]
    fn power_rule_only_adds_rejections_and_spares_cue() {
        let fp = synthetic(150, 6, 2, 1.0, 8);
        let axes = vec![axis_range(-5.0, 5.0, 0.25).unwrap(), axis_range(-5.0, 5.0, 0.25).unwrap()];
        let grid = confidence_set(&fp, ZeroBetaMode::ImposedZero, &axes, 0.05).unwrap();
        assert!(grid.power_rule_applied);
        for i in 0..grid.len() {
            assert!(!grid.reject_raw[i] || grid.reject_final[i]);
            assert!(grid.drlm_values[i] >= -1e-10);
        }
        let ws = DrlmWorkspace::new(&fp).unwrap();
        let cue = DVector::from_vec(grid.cue_point.clone().unwrap());
        assert!(!segment_rejects(&ws, &cue, &cue, grid.critical_value, 100).unwrap());
    }

    #[test]
    fn vacuous_power_rule_when_nothing_rejected() {
        // zero average returns and a tight grid around zero keep every
        // statistic below T r'r / (1 + c), which is tiny here
        let mut fp = synthetic(30, 5, 1, 0.0, 9);
        fp.mu_hat.fill(0.0);
        fp.t = 1;
        let axes = vec![axis_range(-0.1, 0.1, 0.05).unwrap()];
        let grid = confidence_set(&fp, ZeroBetaMode::ImposedZero, &axes, 0.05).unwrap();
        assert!(grid.reject_raw.iter().all(|r| !r));
        assert_eq!(grid.reject_final, grid.reject_raw);
        assert_eq!(grid.shape_class, ShapeClass::UnboundedConvex);
        let proj = project(&grid, 0).unwrap();
        assert_eq!(proj, vec![Interval { lo: -0.1, hi: axes[0][4], lower_censored: true, upper_censored: true }]);
    }

    fn manual_grid(axis: Vec<f64>, reject: Vec<bool>) -> CsGrid {
        CsGrid {
            drlm_values: vec![0.0; axis.len()],
            axes: vec![axis],
            reject_raw: reject.clone(),
            reject_final: reject,
            alpha: 0.05,
            critical_value: 3.84,
            cue_point: None,
            shape_class: ShapeClass::Empty,
            power_rule_applied: false,
            power_rule_disabled: false,
        }
    }

    #[test]
    fn disjoint_projection_and_shape() {
        let axis: Vec<f64> = (0..=10).map(|i| i as f64 * 0.5).collect();
        // accepted on [0,1] and [3,4] (indices 0..=2 and 6..=8)
        let reject: Vec<bool> = (0..=10).map(|i| !(i <= 2 || (6..=8).contains(&i))).collect();
        let grid = manual_grid(axis, reject);
        let proj = project(&grid, 0).unwrap();
        assert_eq!(proj.len(), 2);
        assert_eq!((proj[0].lo, proj[0].hi, proj[0].lower_censored), (0.0, 1.0, true));
        assert_eq!((proj[1].lo, proj[1].hi, proj[1].upper_censored), (3.0, 4.0, false));
        assert_eq!(classify(&grid), ShapeClass::UnboundedDisjoint);
        let mut inner = grid.clone();
        inner.reject_final[0] = true;
        inner.reject_final[1] = true;
        assert_eq!(classify(&inner), ShapeClass::BoundedDisjoint);
        inner.reject_final = vec![true; 11];
        assert_eq!(classify(&inner), ShapeClass::Empty);
    }

    #[test]
    fn two_dimensional_connectivity_is_axis_aligned() {
        // diagonal neighbours do not connect
        let axis = vec![0.0, 1.0, 2.0, 3.0];
        let mut grid = manual_grid(axis.clone(), vec![]);
        grid.axes = vec![axis.clone(), axis];
        grid.drlm_values = vec![0.0; 16];
        grid.reject_final = vec![true; 16];
        grid.reject_final[5] = false; // (1,1)
        grid.reject_final[10] = false; // (2,2)
        grid.reject_raw = grid.reject_final.clone();
        assert_eq!(classify(&grid), ShapeClass::BoundedDisjoint);
        grid.reject_final[6] = false; // (1,2) joins them
        assert_eq!(classify(&grid), ShapeClass::BoundedConvex);
    }

    #[test]
    fn grid_parsing() {
        let axes = parse_grid("-1:1:0.5, 0:0.2:0.1").unwrap();
        assert_eq!(axes[0], vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(axes[1].len(), 3);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a:1:0.1").is_err());
        assert_eq!(axis_range(-5.0, 5.0, 0.05).unwrap().len(), 201);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let fp = synthetic(100, 5, 1, 0.0, 2);
        let bad = [vec![vec![0.0]], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
        for axes in bad {
            assert!(confidence_set(&fp, ZeroBetaMode::ImposedZero, &axes, 0.05).is_err());
        }
        assert!(confidence_set(&fp, ZeroBetaMode::ImposedZero, &[vec![0.0, 1.0]], 0.7).is_err());
    }

    #[test]
    fn default_axes_cover_fm_estimate() {
        let fp = synthetic(100, 6, 2, 0.2, 4);
        let axes = default_axes(&fp, ZeroBetaMode::ImposedZero).unwrap();
        let fm = fm_two_pass(&fp, ZeroBetaMode::ImposedZero).unwrap();
        for (ax, c) in axes.iter().zip(&fm.lambda_f) {
            assert!(ax[0] <= c - 5.0 + 1e-12 && *ax.last().unwrap() >= c + 5.0 - 0.05);
            assert!((ax[1] - ax[0] - 0.05).abs() < 1e-12);
        }
    }
}
