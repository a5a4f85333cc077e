//! J / IS sweep over every K-subset of a factor panel.
//!
//! Moments are accumulated over `T` once. For a subset with factor
//! cross-moments `C = S_rf[:, s]` and `S = S_ff[s, s]`, Woodbury gives
//!
//! `(R, C)' Omega^{-1} (R, C) = P_s + P_sc (S - C'A C)^{-1} P_cs`
//!
//! with `A = S_rr^{-1}` and `P = (Rbar, S_rf)' A (Rbar, S_rf)` precomputed, so
//! J is the smallest root of `(Z, diag(1, S))` and IS that of `(Z_cc, S)`,
//! both scaled by `T`. Each subset costs `O(K^3)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chisq;
use crate::cue_rank::{is_statistic, j_statistic, solve_pencil};
use crate::first_pass::{first_pass_from_panels, FirstPassEstimates};
use crate::linalg::{cholesky_lower, column_means, demean, spd_inverse, sym_eigenvalues, symmetrize};
use crate::panel_io::ZeroBetaMode;
use crate::{Error, Result};

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Colexicographic rank `sum_i C(c_i, i + 1)` of a sorted subset.
pub fn rank(subset: &[u32]) -> u64 {
    subset.iter().enumerate().map(|(i, &c)| binomial(c as u64, i as u64 + 1)).sum()
}

/// Subset of size `k` with colexicographic rank `r`.
pub fn unrank(mut r: u64, k: usize) -> Vec<u32> {
    let mut out = vec![0u32; k];
    for i in (0..k).rev() {
        let j = i as u64 + 1;
        // largest c with C(c, j) <= r
        let mut c = i as u64;
        let mut step = 1u64;
        while binomial(c + step, j) <= r {
            c += step;
            step *= 2;
        }
        while step > 1 {
            step /= 2;
            if binomial(c + step, j) <= r {
                c += step;
            }
        }
        r -= binomial(c, j);
        out[i] = c as u32;
    }
    out
}

/// Advances to the colexicographic successor; `false` after the last subset
/// of `{0..m}`.
pub fn next_colex(subset: &mut [u32], m: u32) -> bool {
    let k = subset.len();
    for i in 0..k {
        let limit = if i + 1 < k { subset[i + 1] } else { m };
        if subset[i] + 1 < limit {
            subset[i] += 1;
            for (j, v) in subset.iter_mut().enumerate().take(i) {
                *v = j as u32;
            }
            return true;
        }
    }
    false
}

/// Rank range `[start, end)` of shard `index` out of `count`.
pub fn shard_range(total: u64, index: u64, count: u64) -> Result<(u64, u64)> {
    if count == 0 || index >= count {
        return Err(Error::InvalidInput(format!("shard {index}/{count} is out of range (indices are 0-based)")));
    }
    let at = |i: u64| ((total as u128 * i as u128) / count as u128) as u64;
    Ok((at(index), at(index + 1)))
}

pub const FLAG_MISSPECIFIED: u8 = 1;
pub const FLAG_WEAK: u8 = 2;
pub const FLAG_DEGENERATE: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    pub subset: Vec<u32>,
    pub j: f64,
    #[serde(rename = "is")]
    pub is_: f64,
    pub p_j: f64,
    pub p_is: f64,
    pub flags: u8,
}

impl ScanRecord {
    pub fn misspecified(&self) -> bool {
        self.flags & FLAG_MISSPECIFIED != 0
    }

    pub fn weak(&self) -> bool {
        self.flags & FLAG_WEAK != 0
    }

    pub fn degenerate(&self) -> bool {
        self.flags & FLAG_DEGENERATE != 0
    }

    fn new(subset: Vec<u32>, j: f64, is_: f64, n: usize) -> Self {
        let k = subset.len();
        let p_j = chisq::sf(j, (n - k) as f64);
        let p_is = chisq::sf(is_, (n - k + 1) as f64);
        let mut flags = 0;
        if p_j <= 0.05 {
            flags |= FLAG_MISSPECIFIED;
        }
        if p_is > 0.05 {
            flags |= FLAG_WEAK;
        }
        Self { subset, j, is_, p_j, p_is, flags }
    }

    fn degenerate_record(subset: Vec<u32>) -> Self {
        Self { subset, j: f64::NAN, is_: f64::NAN, p_j: f64::NAN, p_is: f64::NAN, flags: FLAG_DEGENERATE }
    }
}

/// Sufficient statistics shared by every subset.
#[derive(Debug, Clone)]
pub struct MomentStore {
    t: usize,
    returns: DMatrix<f64>,
    factors: DMatrix<f64>,
    rbar: DVector<f64>,
    srr: DMatrix<f64>,
    srf: DMatrix<f64>,
    sff: DMatrix<f64>,
    /// `(Rbar, S_rf)' S_rr^{-1} (Rbar, S_rf)`, index 0 is `Rbar`.
    gram: DMatrix<f64>,
}

impl MomentStore {
    /// With an estimated zero-beta rate the returns are differenced against
    /// the last asset first.
    pub fn new(returns: &DMatrix<f64>, factors: &DMatrix<f64>, mode: ZeroBetaMode) -> Result<Self> {
        if returns.nrows() != factors.nrows() {
            return Err(Error::InvalidInput("returns and factors have different lengths".into()));
        }
        let returns = match mode {
            ZeroBetaMode::InterceptEstimated => {
                let n = returns.ncols();
                if n < 2 {
                    return Err(Error::InvalidInput("differencing needs at least two assets".into()));
                }
                let last = returns.column(n - 1).into_owned();
                DMatrix::from_fn(returns.nrows(), n - 1, |i, j| returns[(i, j)] - last[i])
            }
            _ => returns.clone(),
        };
        let t = returns.nrows();
        let (n, m) = (returns.ncols(), factors.ncols());
        if t < n + 2 {
            return Err(Error::SampleTooSmall { t, needed: n + 2 });
        }
        let rbar = column_means(&returns);
        let fbar = column_means(factors);
        let rd = demean(&returns, &rbar);
        let fd = demean(factors, &fbar);
        let tf = t as f64;
        let srr = symmetrize(&(rd.transpose() * &rd / tf));
        let srf = rd.transpose() * &fd / tf;
        let sff = symmetrize(&(fd.transpose() * &fd / tf));
        let a = spd_inverse(&srr, "return covariance")?;
        let mut y = DMatrix::zeros(n, m + 1);
        y.set_column(0, &rbar);
        y.view_mut((0, 1), (n, m)).copy_from(&srf);
        let gram = symmetrize(&(y.transpose() * &a * &y));
        Ok(Self { t, returns, factors: factors.clone(), rbar, srr, srf, sff, gram })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Test assets after zero-beta handling.
    pub fn n(&self) -> usize {
        self.rbar.len()
    }

    /// Candidate factors.
    pub fn m(&self) -> usize {
        self.sff.nrows()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.m() || k + 1 > self.n() {
            return Err(Error::InvalidInput(format!(
                "subset size must satisfy 1 <= k <= min(M, N-1) = {}, got {k}",
                self.m().min(self.n() - 1)
            )));
        }
        Ok(())
    }

    fn check_subset(&self, subset: &[u32]) -> Result<()> {
        if subset.windows(2).any(|w| w[0] >= w[1]) || subset.iter().any(|&c| c as usize >= self.m()) {
            return Err(Error::InvalidInput(format!("invalid factor subset {subset:?}")));
        }
        self.check_k(subset.len())
    }

    /// `(J, IS)` through the moment store, or `None` for a degenerate subset.
    pub fn statistics(&self, subset: &[u32]) -> Option<(f64, f64)> {
        let k = subset.len();
        let idx: Vec<usize> = subset.iter().map(|&c| c as usize).collect();
        let s = DMatrix::from_fn(k, k, |i, j| self.sff[(idx[i], idx[j])]);
        let ev = sym_eigenvalues(&s);
        if !(ev[k - 1] > 0.0) || ev[0] <= 1e-12 * ev[k - 1] {
            return None;
        }
        // positions in the Gram matrix: 0 for Rbar, 1 + c for factor c
        let g: Vec<usize> = std::iter::once(0).chain(idx.iter().map(|c| c + 1)).collect();
        let ps = DMatrix::from_fn(k + 1, k + 1, |i, j| self.gram[(g[i], g[j])]);
        let pcc = ps.view((1, 1), (k, k)).into_owned();
        let inner = cholesky_lower(&symmetrize(&(&s - &pcc)), "subset inner matrix").ok()?;
        let psc = ps.columns(1, k).into_owned();
        let x = inner.solve_lower_triangular(&psc.transpose())?;
        let z = symmetrize(&(&ps + x.transpose() * &x));
        let mut d = DMatrix::zeros(k + 1, k + 1);
        d[(0, 0)] = 1.0;
        d.view_mut((1, 1), (k, k)).copy_from(&s);
        let tf = self.t as f64;
        let j = solve_pencil(&z, &d).ok()?.smallest_root.max(0.0) * tf;
        let zcc = z.view((1, 1), (k, k)).into_owned();
        let is_ = solve_pencil(&zcc, &s).ok()?.smallest_root.max(0.0) * tf;
        (j.is_finite() && is_.is_finite()).then_some((j, is_))
    }

    pub fn record(&self, subset: Vec<u32>) -> ScanRecord {
        match self.statistics(&subset) {
            Some((j, is_)) => ScanRecord::new(subset, j, is_, self.n()),
            None => ScanRecord::degenerate_record(subset),
        }
    }

    /// First-pass estimates of a subset by sub-matrix selection.
    pub fn assemble(&self, subset: &[u32]) -> Result<FirstPassEstimates> {
        self.check_subset(subset)?;
        let k = subset.len();
        let idx: Vec<usize> = subset.iter().map(|&c| c as usize).collect();
        let s = DMatrix::from_fn(k, k, |i, j| self.sff[(idx[i], idx[j])]);
        let c = DMatrix::from_fn(self.n(), k, |i, j| self.srf[(i, idx[j])]);
        let sinv = spd_inverse(&s, "factor covariance")?;
        let beta = &c * &sinv;
        let omega = symmetrize(&(&self.srr - &beta * c.transpose()));
        let tstats = crate::first_pass::beta_tstats(&beta, &omega, &s, self.t);
        Ok(FirstPassEstimates {
            beta_hat: beta,
            omega_hat: omega,
            qff_hat: s,
            mu_hat: self.rbar.clone(),
            fbar: DVector::from_iterator(k, idx.iter().map(|&c| self.factors.column(c).mean())),
            t: self.t,
            beta_tstats: tstats,
            asset_names: (1..=self.n()).map(|i| format!("asset{i}")).collect(),
            factor_names: idx.iter().map(|c| format!("factor{}", c + 1)).collect(),
        })
    }

    /// First-pass estimates of a subset by re-running the regressions on the
    /// sliced panel.
    pub fn sliced(&self, subset: &[u32]) -> Result<FirstPassEstimates> {
        self.check_subset(subset)?;
        let f = DMatrix::from_fn(self.t, subset.len(), |i, j| self.factors[(i, subset[j] as usize)]);
        first_pass_from_panels(&self.returns, &f)
    }

    /// Records for colexicographic ranks `[start, end)`, in rank order.
    pub fn scan_range(&self, k: usize, start: u64, end: u64, mut sink: impl FnMut(ScanRecord) -> Result<()>) -> Result<()> {
        self.check_k(k)?;
        let total = binomial(self.m() as u64, k as u64);
        if start > end || end > total {
            return Err(Error::InvalidInput(format!("rank range {start}..{end} exceeds {total} subsets")));
        }
        // Chunks small enough to keep every worker busy; output order never
        // depends on chunking.
        const BATCH: u64 = 64;
        let workers = rayon::current_num_threads() as u64;
        let chunk = ((end - start) / (workers * 16)).clamp(32, 2048);
        let mut lo = start;
        while lo < end {
            let hi = (lo + chunk * BATCH).min(end);
            let chunks: Vec<(u64, u64)> = (lo..hi).step_by(chunk as usize).map(|c| (c, (c + chunk).min(hi))).collect();
            let done: Vec<Vec<ScanRecord>> = chunks
                .into_par_iter()
                .map(|(a, b)| {
                    let mut subset = unrank(a, k);
                    let mut out = Vec::with_capacity((b - a) as usize);
                    for r in a..b {
                        out.push(self.record(subset.clone()));
                        if r + 1 < b {
                            next_colex(&mut subset, self.m() as u32);
                        }
                    }
                    out
                })
                .collect();
            for rec in done.into_iter().flatten() {
                sink(rec)?;
            }
            lo = hi;
        }
        Ok(())
    }

    /// Every subset of size `k`, or one shard `(index, count)` of them.
    pub fn scan(&self, k: usize, shard: Option<(u64, u64)>) -> Result<Vec<ScanRecord>> {
        self.check_k(k)?;
        let total = binomial(self.m() as u64, k as u64);
        let (start, end) = match shard {
            Some((i, n)) => shard_range(total, i, n)?,
            None => (0, total),
        };
        let mut out = Vec::with_capacity((end - start) as usize);
        self.scan_range(k, start, end, |r| {
            out.push(r);
            Ok(())
        })?;
        Ok(out)
    }

    /// Compares batched statistics with regressions on the sliced panel for
    /// `count` random subsets.
    pub fn audit(&self, k: usize, count: usize, seed: u64) -> Result<AuditReport> {
        self.check_k(k)?;
        let total = binomial(self.m() as u64, k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks: Vec<u64> = if (count as u64) >= total {
            (0..total).collect()
        } else {
            (0..count).map(|_| rng.random_range(0..total)).collect()
        };
        let rows: Vec<(f64, bool)> = ranks
            .par_iter()
            .map(|&r| {
                let subset = unrank(r, k);
                let batched = self.statistics(&subset);
                let direct = self.sliced(&subset).and_then(|fp| {
                    let (j, _) = j_statistic(&fp, ZeroBetaMode::ImposedZero)?;
                    Ok((j, is_statistic(&fp, ZeroBetaMode::ImposedZero)?))
                });
                match (batched, direct) {
                    (Some((bj, bi)), Ok((dj, di))) => {
                        let dev = ((bj - dj).abs() / dj.abs().max(1.0)).max((bi - di).abs() / di.abs().max(1.0));
                        (dev, dev <= 1e-8)
                    }
                    (None, Err(_)) => (0.0, true),
                    _ => (f64::INFINITY, false),
                }
            })
            .collect();
        Ok(AuditReport {
            audited: rows.len(),
            mismatches: rows.iter().filter(|r| !r.1).count(),
            max_deviation: rows.iter().fold(0.0, |m, r| m.max(r.0)),
        })
    }
}

/// Batched-versus-direct comparison. Deviations are relative to
/// `max(1, |direct|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditReport {
    pub audited: usize,
    pub mismatches: usize,
    pub max_deviation: f64,
}

/// Joint counts of `(IS, J)` over common bin edges; `counts[i][j]` holds
/// IS bin `i` and J bin `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram2d {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSummary {
    pub k: usize,
    pub n_models: u64,
    pub n_degenerate: u64,
    pub pct_misspecified: f64,
    pub pct_weak: f64,
    pub hist2d: Histogram2d,
}

impl ScanSummary {
    /// Long-form histogram: IS bin bounds, J bin bounds, count.
    pub fn histogram_csv(&self) -> String {
        let e = &self.hist2d.edges;
        let mut out = String::from("is_lo,is_hi,j_lo,j_hi,count\n");
        for (i, row) in self.hist2d.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                out.push_str(&format!("{:?},{:?},{:?},{:?},{c}\n", e[i], e[i + 1], e[j], e[j + 1]));
            }
        }
        out
    }
}

/// Percentages over non-degenerate records and a `bins x bins` histogram on
/// `[0, max IS]`.
pub fn summarize(records: &[ScanRecord], k: usize, bins: usize) -> Result<ScanSummary> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no scan records to summarize".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if let Some(r) = records.iter().find(|r| r.subset.len() != k) {
        return Err(Error::InvalidInput(format!("record {:?} does not have {k} factors", r.subset)));
    }
    let valid: Vec<&ScanRecord> = records.iter().filter(|r| !r.degenerate()).collect();
    let nv = valid.len() as f64;
    let pct = |f: &dyn Fn(&ScanRecord) -> bool| {
        if valid.is_empty() {
            0.0
        } else {
            100.0 * valid.iter().filter(|r| f(r)).count() as f64 / nv
        }
    };
    let top = valid.iter().fold(0.0f64, |m, r| m.max(r.is_).max(r.j));
    let top = if top > 0.0 { top } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    let bin = |x: f64| (((x / top) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut counts = vec![vec![0u64; bins]; bins];
    for r in &valid {
        counts[bin(r.is_)][bin(r.j)] += 1;
    }
    Ok(ScanSummary {
        k,
        n_models: records.len() as u64,
        n_degenerate: (records.len() - valid.len()) as u64,
        pct_misspecified: pct(&|r| r.misspecified()),
        pct_weak: pct(&|r| r.weak()),
        hist2d: Histogram2d { edges, counts },
    })
}

pub const MAGIC: &[u8; 4] = b"ZSCN";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version, `k` and record count.
pub const HEADER_LEN: u64 = 20;

pub fn record_len(k: usize) -> usize {
    4 * k + 4 * 8 + 1
}

/// Little-endian shard writer; the record count is patched in on
/// [`RecordWriter::finish`].
pub struct RecordWriter<W: Write + Seek> {
    inner: W,
    k: usize,
    count: u64,
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: &Path, k: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::new(BufWriter::new(file), k)
    }
}

impl<W: Write + Seek> RecordWriter<W> {
    pub fn new(mut inner: W, k: usize) -> Result<Self> {
        let mut head = Vec::with_capacity(HEADER_LEN as usize);
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        head.extend_from_slice(&(k as u32).to_le_bytes());
        head.extend_from_slice(&0u64.to_le_bytes());
        inner.write_all(&head).map_err(io_format)?;
        Ok(Self { inner, k, count: 0 })
    }

    pub fn write(&mut self, r: &ScanRecord) -> Result<()> {
        if r.subset.len() != self.k {
            return Err(Error::InvalidInput(format!("record has {} factors, shard holds {}", r.subset.len(), self.k)));
        }
        let mut buf = Vec::with_capacity(record_len(self.k));
        for c in &r.subset {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for v in [r.j, r.is_, r.p_j, r.p_is] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(r.flags);
        self.inner.write_all(&buf).map_err(io_format)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.seek(SeekFrom::Start(12)).map_err(io_format)?;
        self.inner.write_all(&self.count.to_le_bytes()).map_err(io_format)?;
        self.inner.seek(SeekFrom::End(0)).map_err(io_format)?;
        self.inner.flush().map_err(io_format)?;
        Ok(self.inner)
    }
}

fn io_format(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

/// Reads a whole shard.
pub fn read_records<R: Read>(mut input: R) -> Result<(usize, Vec<ScanRecord>)> {
    let mut head = [0u8; HEADER_LEN as usize];
    input.read_exact(&mut head).map_err(|_| Error::Format("truncated shard header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Format("not a zoo-scan shard (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported shard version {version}")));
    }
    let k = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
    let len = record_len(k);
    let mut buf = vec![0u8; len];
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    for i in 0..count {
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("shard truncated at record {i} of {count}")))?;
        let subset = (0..k).map(|c| u32::from_le_bytes(buf[4 * c..4 * c + 4].try_into().expect("4 bytes"))).collect();
        let f = |o: usize| f64::from_le_bytes(buf[4 * k + 8 * o..4 * k + 8 * o + 8].try_into().expect("8 bytes"));
        out.push(ScanRecord { subset, j: f(0), is_: f(1), p_j: f(2), p_is: f(3), flags: buf[len - 1] });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io_format)? != 0 {
        return Err(Error::Format(format!("trailing bytes after {count} records")));
    }
    Ok((k, out))
}

pub fn read_shard(path: &Path) -> Result<(usize, Vec<ScanRecord>)> {
    let file = File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    read_records(BufReader::new(file))
}

pub fn records_csv(records: &[ScanRecord]) -> String {
    let mut out = String::from("subset,j,is,p_j,p_is,misspecified,weak,degenerate\n");
    for r in records {
        let s: Vec<String> = r.subset.iter().map(u32::to_string).collect();
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{},{},{}\n",
            s.join(" "),
            r.j,
            r.is_,
            r.p_j,
            r.p_is,
            r.misspecified(),
            r.weak(),
            r.degenerate()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn mini_zoo(t: usize, n: usize, m: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(t, m, |_, _| rng.random_range(-1.0..1.0));
        let load = DMatrix::from_fn(n, m, |_, j| if j < 3 { rng.random_range(0.2..1.5) } else { rng.random_range(-0.2..0.2) });
        let mut r = &f * load.transpose();
        for v in r.iter_mut() {
            *v += 0.3 + rng.random_range(-0.5..0.5);
        }
        (r, f)
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(12, 2), 66);
        assert_eq!(binomial(150, 6), 14_297_000_725);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(7, 0), 1);
    }

    #[test]
    fn colex_order_matches_rank() {
        let (m, k) = (9u32, 3usize);
        let mut s: Vec<u32> = (0..k as u32).collect();
        let mut seen = 0u64;
        loop {
            assert_eq!(rank(&s), seen);
            assert_eq!(unrank(seen, k), s);
            seen += 1;
            let prev = s.clone();
            if !next_colex(&mut s, m) {
                break;
            }
            // colex: compare from the largest element
            assert!(prev.iter().rev().lt(s.iter().rev()));
        }
        assert_eq!(seen, binomial(m as u64, k as u64));
    }

    #[test]
    fn shards_partition_ranks() {
        let total = 1001;
        let mut next = 0;
        for i in 0..7 {
            let (a, b) = shard_range(total, i, 7).unwrap();
            assert_eq!(a, next);
            next = b;
        }
        assert_eq!(next, total);
        assert!(shard_range(total, 7, 7).is_err());
    }

    #[test]
    fn assembled_estimates_match_sliced_regression() {
        let (r, f) = mini_zoo(200, 8, 6, 1);
        let store = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap();
        for subset in [vec![0u32, 3], vec![1, 2, 5], vec![4]] {
            let a = store.assemble(&subset).unwrap();
            let d = store.sliced(&subset).unwrap();
            assert!((&a.beta_hat - &d.beta_hat).amax() < 1e-10);
            assert!((&a.omega_hat - &d.omega_hat).amax() < 1e-10);
            assert!((&a.qff_hat - &d.qff_hat).amax() < 1e-10);
            assert!((&a.mu_hat - &d.mu_hat).amax() < 1e-12);
        }
    }

    #[test]
    fn batched_statistics_match_direct() {
        for mode in [ZeroBetaMode::ImposedZero, ZeroBetaMode::InterceptEstimated] {
            let (r, f) = mini_zoo(250, 10, 7, 2);
            let store = MomentStore::new(&r, &f, mode).unwrap();
            let report = store.audit(3, 1000, 5).unwrap();
            assert_eq!(report.audited, 35);
            assert_eq!(report.mismatches, 0, "{report:?}");
            // and against the full-data intercept path
            let sub = [1u32, 4];
            let (bj, bi) = store.statistics(&sub).unwrap();
            let fs = DMatrix::from_fn(250, 2, |i, j| f[(i, sub[j] as usize)]);
            let fp = first_pass_from_panels(&r, &fs).unwrap();
            let (dj, _) = j_statistic(&fp, mode).unwrap();
            let di = is_statistic(&fp, mode).unwrap();
            assert!((bj - dj).abs() < 1e-8 * dj.max(1.0) && (bi - di).abs() < 1e-8 * di.max(1.0));
        }
    }

    #[test]
    fn single_subset_and_relabeling() {
        let (r, f) = mini_zoo(150, 6, 2, 3);
        let store = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap();
        let recs = store.scan(2, None).unwrap();
        assert_eq!(recs.len(), 1);
        let fp = first_pass_from_panels(&r, &f).unwrap();
        let (j, _) = j_statistic(&fp, ZeroBetaMode::ImposedZero).unwrap();
        assert!((recs[0].j - j).abs() < 1e-8 * j.max(1.0));

        let (r, f) = mini_zoo(150, 6, 5, 4);
        let perm = [3usize, 0, 4, 2, 1];
        let fperm = DMatrix::from_fn(150, 5, |i, j| f[(i, perm[j])]);
        let a = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap().scan(2, None).unwrap();
        let b = MomentStore::new(&r, &fperm, ZeroBetaMode::ImposedZero).unwrap().scan(2, None).unwrap();
        let key = |v: &[ScanRecord]| {
            let mut x: Vec<(i64, i64)> = v.iter().map(|r| ((r.j * 1e6).round() as i64, (r.is_ * 1e6).round() as i64)).collect();
            x.sort();
            x
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn mini_zoo_scan_counts_and_interlacing() {
        let (r, f) = mini_zoo(300, 12, 12, 6);
        let store = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap();
        let recs = store.scan(2, None).unwrap();
        assert_eq!(recs.len(), 66);
        for (i, rec) in recs.iter().enumerate() {
            assert_eq!(rank(&rec.subset), i as u64);
            assert!(rec.j <= rec.is_ + 1e-8);
            assert_eq!(rec.misspecified(), rec.p_j <= 0.05);
            assert_eq!(rec.weak(), rec.p_is > 0.05);
        }
        let sharded: Vec<ScanRecord> = (0..3).flat_map(|i| store.scan(2, Some((i, 3))).unwrap()).collect();
        assert_eq!(sharded, recs);
    }

    #[test]
    fn noise_factor_is_weak() {
        let (r, mut f) = mini_zoo(400, 10, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for i in 0..400 {
            f[(i, 3)] = rng.random_range(-1.0..1.0);
        }
        let store = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap();
        let rec = store.record(vec![3]);
        assert!(rec.p_is > 0.05, "{rec:?}");
        assert!(rec.weak());
    }

    #[test]
    fn degenerate_subsets_are_flagged() {
        let (r, mut f) = mini_zoo(200, 8, 4, 8);
        let col = f.column(0).into_owned();
        f.set_column(1, &col);
        let store = MomentStore::new(&r, &f, ZeroBetaMode::ImposedZero).unwrap();
        let rec = store.record(vec![0, 1]);
        assert!(rec.degenerate());
        let all = store.scan(2, None).unwrap();
        let s = summarize(&all, 2, 10).unwrap();
        assert_eq!(s.n_degenerate, 1);
        assert_eq!(s.n_models, 6);
        let mass: u64 = s.hist2d.counts.iter().flatten().sum();
        assert_eq!(mass, 5);
    }

    #[test]
    fn summary_percentages_and_histogram() {
        let recs: Vec<ScanRecord> = (0..10)
            .map(|i| ScanRecord::new(vec![i], 50.0 + i as f64, 60.0 + i as f64, 25))
            .collect();
        let s = summarize(&recs, 1, 60).unwrap();
        assert_eq!(s.pct_misspecified, 100.0);
        assert_eq!(s.pct_weak, 0.0);
        assert_eq!(s.hist2d.counts.iter().flatten().sum::<u64>(), 10);
        for (i, row) in s.hist2d.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                assert!(*c == 0 || j <= i);
            }
        }
        assert!(summarize(&[], 1, 60).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let recs = vec![
            ScanRecord::new(vec![0, 4], 12.5, 30.25, 10),
            ScanRecord::degenerate_record(vec![1, 2]),
        ];
        let mut w = RecordWriter::new(Cursor::new(Vec::new()), 2).unwrap();
        for r in &recs {
            w.write(r).unwrap();
        }
        let bytes = w.finish().unwrap().into_inner();
        assert_eq!(bytes.len() as u64, HEADER_LEN + 2 * record_len(2) as u64);
        assert_eq!(&bytes[0..4], b"ZSCN");
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        let (k, back) = read_records(Cursor::new(&bytes)).unwrap();
        assert_eq!(k, 2);
        assert_eq!(back[0], recs[0]);
        assert!(back[1].degenerate() && back[1].j.is_nan());
        assert!(read_records(Cursor::new(&bytes[..bytes.len() - 3])).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_records(Cursor::new(&bad)).is_err());
    }
}
