//! Loading, validating and aligning return/factor panels.
//!
//! Values are taken as percent per period and are never rescaled. Date
//! labels are opaque strings: rows are ordered and matched by exact label,
//! and ordering is plain string ordering, so labels must sort
//! chronologically (`1963Q3`, `196307`, `1963-07-31` all do).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelKind {
    Returns,
    Factors,
}

impl fmt::Display for PanelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PanelKind::Returns => f.write_str("returns"),
            PanelKind::Factors => f.write_str("factors"),
        }
    }
}

/// How the zero-beta rate enters the cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroBetaMode {
    /// Returns are excess returns; no intercept.
    ImposedZero,
    /// Returns were differenced against a reference asset.
    ReferenceDifferenced,
    /// An intercept column is estimated alongside the premia.
    InterceptEstimated,
}

/// A `T x M` panel straight from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub dates: Vec<String>,
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl RawPanel {
    pub fn new(dates: Vec<String>, names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != names.len() {
            return Err(Error::InvalidInput(format!(
                "panel shape {}x{} does not match {} dates and {} names",
                values.nrows(),
                values.ncols(),
                dates.len(),
                names.len()
            )));
        }
        if names.is_empty() {
            return Err(Error::InvalidInput("panel has no value columns".into()));
        }
        if dates.len() < 2 {
            return Err(Error::InvalidInput(format!("panel has {} rows, need at least 2", dates.len())));
        }
        if let Some(w) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::DateOrder {
                path: "<memory>".into(),
                row: w + 2,
                previous: dates[w].clone(),
                current: dates[w + 1].clone(),
            });
        }
        Ok(Self { dates, names, values })
    }

    pub fn t(&self) -> usize {
        self.dates.len()
    }

    pub fn m(&self) -> usize {
        self.names.len()
    }

    /// Writes the panel with full round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(io_err)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut row = vec![d.clone()];
            row.extend(self.values.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}

/// Reads a panel CSV: header row, first column the date label, remaining
/// cells finite decimals. Rows are reported 1-based counting data rows.
pub fn load_csv(path: &Path, kind: PanelKind) -> Result<RawPanel> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };

    let headers = rdr.headers().map_err(|e| parse_err(0, "header", e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(parse_err(0, "header", format!("{kind} file needs a date column and at least one value column")));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();

    let mut dates: Vec<String> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| parse_err(row, "-", e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(row, "-", format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let date = rec[0].to_string();
        if date.is_empty() {
            return Err(parse_err(row, &headers[0], "empty date label".into()));
        }
        if let Some(prev) = dates.last() {
            if *prev >= date {
                return Err(Error::DateOrder {
                    path: path.to_path_buf(),
                    row,
                    previous: prev.clone(),
                    current: date,
                });
            }
        }
        for (j, name) in names.iter().enumerate() {
            let cell = &rec[j + 1];
            if cell.is_empty() {
                return Err(parse_err(row, name, "missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, name, format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, name, format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
        dates.push(date);
    }
    if dates.len() < 2 {
        return Err(parse_err(dates.len(), "-", format!("{kind} file has fewer than 2 data rows")));
    }
    let t = dates.len();
    let values = DMatrix::from_row_slice(t, names.len(), &values);
    Ok(RawPanel { dates, names, values })
}

/// Time-aligned returns and factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    pub dates: Vec<String>,
    pub return_names: Vec<String>,
    pub factor_names: Vec<String>,
    /// `T x N`
    pub returns: DMatrix<f64>,
    /// `T x K`
    pub factors: DMatrix<f64>,
    pub zero_beta_mode: ZeroBetaMode,
    pub reference_asset: Option<String>,
}

impl AlignedDataset {
    /// Builds a dataset from already-aligned matrices with generated labels.
    pub fn from_matrices(returns: DMatrix<f64>, factors: DMatrix<f64>) -> Result<Self> {
        if returns.nrows() != factors.nrows() {
            return Err(Error::InvalidInput(format!(
                "returns have {} rows but factors have {}",
                returns.nrows(),
                factors.nrows()
            )));
        }
        let t = returns.nrows();
        Ok(Self {
            dates: (1..=t).map(|i| format!("t{i:06}")).collect(),
            return_names: (1..=returns.ncols()).map(|i| format!("asset{i}")).collect(),
            factor_names: (1..=factors.ncols()).map(|i| format!("factor{i}")).collect(),
            returns,
            factors,
            zero_beta_mode: ZeroBetaMode::InterceptEstimated,
            reference_asset: None,
        })
    }

    pub fn t(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n(&self) -> usize {
        self.returns.ncols()
    }

    pub fn k(&self) -> usize {
        self.factors.ncols()
    }

    /// Replaces the returns by their differences against `reference`, which
    /// is dropped from the cross-section.
    pub fn reference_difference(&self, reference: &str) -> Result<Self> {
        let r = self
            .return_names
            .iter()
            .position(|n| n == reference)
            .ok_or_else(|| Error::UnknownColumn(reference.to_string()))?;
        if self.n() < 2 {
            return Err(Error::InvalidInput("reference differencing needs at least two assets".into()));
        }
        let keep: Vec<usize> = (0..self.n()).filter(|&j| j != r).collect();
        let mut returns = DMatrix::zeros(self.t(), keep.len());
        for (c, &j) in keep.iter().enumerate() {
            returns.set_column(c, &(self.returns.column(j) - self.returns.column(r)));
        }
        Ok(Self {
            dates: self.dates.clone(),
            return_names: keep.iter().map(|&j| self.return_names[j].clone()).collect(),
            factor_names: self.factor_names.clone(),
            returns,
            factors: self.factors.clone(),
            zero_beta_mode: ZeroBetaMode::ReferenceDifferenced,
            reference_asset: Some(reference.to_string()),
        })
    }

    /// Switches between excess-return and estimated-intercept treatment.
    /// Reference differencing is only reachable via [`Self::reference_difference`].
    pub fn set_zero_beta_mode(&self, mode: ZeroBetaMode) -> Result<Self> {
        if mode == ZeroBetaMode::ReferenceDifferenced {
            return Err(Error::InvalidInput(
                "reference_differenced is set by reference_difference, not directly".into(),
            ));
        }
        let mut out = self.clone();
        out.zero_beta_mode = mode;
        Ok(out)
    }
}

/// Digit/letter shape of a date label, e.g. `1963Q3` -> `9999A9`.
fn label_shape(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_digit() {
                '9'
            } else if c.is_alphabetic() {
                'A'
            } else {
                c
            }
        })
        .collect()
}

/// Restricts both panels to their common dates. The result starts in
/// `InterceptEstimated` mode.
pub fn align(returns: &RawPanel, factors: &RawPanel) -> Result<AlignedDataset> {
    let (dates, r, f) = align_matrices(returns, factors)?;
    if factors.m() > returns.m() {
        return Err(Error::InvalidInput(format!(
            "{} factors but only {} test assets; need K < N + 1",
            factors.m(),
            returns.m()
        )));
    }
    Ok(AlignedDataset {
        dates,
        return_names: returns.names.clone(),
        factor_names: factors.names.clone(),
        returns: r,
        factors: f,
        zero_beta_mode: ZeroBetaMode::InterceptEstimated,
        reference_asset: None,
    })
}

/// Common dates and the matching rows of both panels, with no restriction on
/// the number of factors. Factor-zoo panels go through here.
pub fn align_matrices(returns: &RawPanel, factors: &RawPanel) -> Result<(Vec<String>, DMatrix<f64>, DMatrix<f64>)> {
    let (rs, fs) = (label_shape(&returns.dates[0]), label_shape(&factors.dates[0]));
    if rs != fs {
        return Err(Error::FrequencyMismatch {
            returns: returns.dates[0].clone(),
            factors: factors.dates[0].clone(),
        });
    }
    let factor_rows: HashMap<&str, usize> =
        factors.dates.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = returns
        .dates
        .iter()
        .enumerate()
        .filter_map(|(i, d)| factor_rows.get(d.as_str()).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let t = pairs.len();
    let r = DMatrix::from_fn(t, returns.m(), |i, j| returns.values[(pairs[i].0, j)]);
    let f = DMatrix::from_fn(t, factors.m(), |i, j| factors.values[(pairs[i].1, j)]);
    Ok((pairs.iter().map(|&(i, _)| returns.dates[i].clone()).collect(), r, f))
}

impl AlignedDataset {
    fn as_panels(&self) -> (RawPanel, RawPanel) {
        (
            RawPanel { dates: self.dates.clone(), names: self.return_names.clone(), values: self.returns.clone() },
            RawPanel { dates: self.dates.clone(), names: self.factor_names.clone(), values: self.factors.clone() },
        )
    }

    /// Aligns an already-aligned dataset again (identity up to mode reset).
    pub fn realign(&self) -> Result<Self> {
        let (r, f) = self.as_panels();
        let mut out = align(&r, &f)?;
        out.zero_beta_mode = self.zero_beta_mode;
        out.reference_asset = self.reference_asset.clone();
        Ok(out)
    }
}
