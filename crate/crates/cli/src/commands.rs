use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use premia_core::cross_section::{fm_two_pass, fm_tstats, SeKind};
use premia_core::cue_rank::{cue_estimate, diagnostics};
use premia_core::drlm::{confidence_set_with, default_axes, parse_grid, project, CsOptions};
use premia_core::first_pass::{beta_significance_table, beta_table_csv, estimate_first_pass};
use premia_core::panel_io::{align, align_matrices, load_csv, AlignedDataset, PanelKind, ZeroBetaMode};
use premia_core::sim_lab::{
    calibrate, power_curve, pseudo_true_contours, rejection_surface, synthetic_model, theorem2_decomposition, DgpSpec,
    EDirection, H0Rule, SimTest,
};
use premia_core::zoo_scan::{
    binomial, read_shard, records_csv, shard_range, summarize, MomentStore, RecordWriter, ScanRecord,
};
use premia_core::{Error, FirstPassEstimates, PopulationModel, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Cli, Command, DataArgs, Experiment, H0Arg, MethodArg, SeArg, SimulateArgs, TestArg, ZeroBetaArg, SCHEMA_VERSION};

/// Runs the parsed command and renders its JSON document.
pub fn run(cli: &Cli) -> Result<String> {
    let result = match &cli.command {
        Command::Firstpass { data, csv } => firstpass(data, csv.as_deref())?,
        Command::Estimate { data, method, se } => estimate(data, *method, *se)?,
        Command::Jis { data, csv } => jis(data, csv.as_deref())?,
        Command::DrlmCs { data, alpha, grid, no_power_rule, segment_samples, csv } => {
            let opts = CsOptions { alpha: *alpha, power_rule: !no_power_rule, segment_samples: *segment_samples };
            drlm_cs(data, grid.as_deref(), &opts, csv.as_deref())?
        }
        Command::Simulate(args) => simulate(args)?,
        Command::ZooScan { data, k, shard, out, audit, audit_seed, csv } => {
            zoo_scan(data, *k, shard, out, *audit, *audit_seed, csv.as_deref())?
        }
        Command::ZooSummarize { shards, bins, csv } => zoo_summarize(shards, *bins, csv.as_deref())?,
    };
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": env!("CARGO_PKG_VERSION"),
        "config": to_value(&cli.command)?,
        "result": result,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidInput(format!("cannot render output: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::InvalidInput(format!("cannot render output: {e}")))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Row-major nested arrays; non-finite entries become `null`.
fn matrix_rows(m: &DMatrix<f64>) -> Value {
    Value::Array(m.row_iter().map(|r| json!(r.iter().map(|&x| finite(x)).collect::<Vec<_>>())).collect())
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn check_zero_beta(data: &DataArgs) -> Result<()> {
    match (data.zero_beta, &data.reference) {
        (ZeroBetaArg::Zero, Some(_)) => Err(Error::InvalidInput("--reference requires --zero-beta diff".into())),
        (ZeroBetaArg::Diff, None) => Err(Error::InvalidInput("--zero-beta diff requires --reference NAME".into())),
        _ => Ok(()),
    }
}

fn load(data: &DataArgs) -> Result<(AlignedDataset, ZeroBetaMode)> {
    check_zero_beta(data)?;
    let returns = load_csv(&data.returns, PanelKind::Returns)?;
    let factors = load_csv(&data.factors, PanelKind::Factors)?;
    let ds = align(&returns, &factors)?;
    let ds = match (data.zero_beta, &data.reference) {
        (_, Some(name)) => ds.reference_difference(name)?,
        (ZeroBetaArg::Zero, None) => ds.set_zero_beta_mode(ZeroBetaMode::ImposedZero)?,
        (_, None) => ds.set_zero_beta_mode(ZeroBetaMode::InterceptEstimated)?,
    };
    log::info!("aligned panel: T = {}, N = {}, K = {}, {:?}", ds.t(), ds.n(), ds.k(), ds.zero_beta_mode);
    let mode = ds.zero_beta_mode;
    Ok((ds, mode))
}

fn load_first_pass(data: &DataArgs) -> Result<(FirstPassEstimates, ZeroBetaMode)> {
    let (ds, mode) = load(data)?;
    Ok((estimate_first_pass(&ds)?, mode))
}

fn firstpass(data: &DataArgs, csv: Option<&Path>) -> Result<Value> {
    let (fp, mode) = load_first_pass(data)?;
    if let Some(path) = csv {
        write_file(path, &beta_table_csv(&fp))?;
    }
    let table: Vec<Value> = beta_significance_table(&fp)
        .into_iter()
        .map(|row| {
            json!({
                "asset": row.asset,
                "beta": row.beta,
                "t_stat": row.t_stat.iter().map(|&x| finite(x)).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "zero_beta_mode": mode,
        "t": fp.t,
        "n": fp.n(),
        "k": fp.k(),
        "asset_names": fp.asset_names,
        "factor_names": fp.factor_names,
        "beta_hat": matrix_rows(&fp.beta_hat),
        "beta_tstats": matrix_rows(&fp.beta_tstats),
        "omega_hat": matrix_rows(&fp.omega_hat),
        "qff_hat": matrix_rows(&fp.qff_hat),
        "mu_hat": fp.mu_hat.as_slice(),
        "fbar": fp.fbar.as_slice(),
        "beta_table": table,
    }))
}

fn estimate(data: &DataArgs, method: MethodArg, se: SeArg) -> Result<Value> {
    let (fp, mode) = load_first_pass(data)?;
    let res = match method {
        MethodArg::Fm => {
            let kind = match se {
                SeArg::Plain => SeKind::Plain,
                SeArg::Shanken => SeKind::Shanken,
            };
            fm_tstats(&fp, &fm_two_pass(&fp, mode)?, kind)?
        }
        MethodArg::Cue => cue_estimate(&fp, mode)?,
    };
    let mut v = to_value(&res)?;
    v["factor_names"] = json!(fp.factor_names);
    v["zero_beta_mode"] = to_value(&mode)?;
    Ok(v)
}

fn jis(data: &DataArgs, csv: Option<&Path>) -> Result<Value> {
    let (fp, mode) = load_first_pass(data)?;
    let d = diagnostics(&fp, mode)?;
    let (lambda_cue, lambda_0, unbounded) = match cue_estimate(&fp, mode) {
        Ok(r) => (Some(r.lambda_f), r.lambda_0, None),
        Err(Error::CueUnbounded { eigvec }) => {
            log::warn!("CUE is unbounded; premia are not identified");
            (None, None, Some(eigvec))
        }
        Err(e) => return Err(e),
    };
    if let Some(path) = csv {
        write_file(path, &format!("J,IS\n{:?},{:?}\n", d.j_stat, d.is_stat))?;
    }
    Ok(json!({
        "J": d.j_stat,
        "df_J": d.df_j,
        "p_J": d.p_j,
        "IS": d.is_stat,
        "df_IS": d.df_is,
        "p_IS": d.p_is,
        "lambda_cue": lambda_cue,
        "lambda_0_cue": lambda_0,
        "cue_unbounded_direction": unbounded,
        "factor_names": fp.factor_names,
        "zero_beta_mode": mode,
    }))
}

fn drlm_cs(data: &DataArgs, grid: Option<&str>, opts: &CsOptions, csv: Option<&Path>) -> Result<Value> {
    let (fp, mode) = load_first_pass(data)?;
    let axes = match grid {
        Some(g) => parse_grid(g)?,
        None => default_axes(&fp, mode)?,
    };
    if axes.len() != fp.k() {
        return Err(Error::InvalidInput(format!("--grid has {} axes but the model has {} factors", axes.len(), fp.k())));
    }
    let cs = confidence_set_with(&fp, mode, &axes, opts)?;
    if let Some(path) = csv {
        write_file(path, &cs.to_csv(&fp.factor_names))?;
    }
    let projections = (0..fp.k())
        .map(|i| {
            Ok(json!({
                "factor": fp.factor_names[i],
                "intervals": project(&cs, i)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let axis_info: Vec<Value> = axes
        .iter()
        .zip(&fp.factor_names)
        .map(|(a, name)| json!({ "factor": name, "lo": a[0], "hi": a[a.len() - 1], "points": a.len() }))
        .collect();
    Ok(json!({
        "shape_class": cs.shape_class,
        "projections": projections,
        "alpha": cs.alpha,
        "critical_value": cs.critical_value,
        "cue_point": cs.cue_point,
        "axes": axis_info,
        "grid_points": cs.len(),
        "accepted_points": cs.accepted_count(),
        "rejected_raw": cs.reject_raw.iter().filter(|&&r| r).count(),
        "power_rule_applied": cs.power_rule_applied,
        "power_rule_disabled": cs.power_rule_disabled,
        "zero_beta_mode": mode,
    }))
}

fn parse_list(flag: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("{flag}: cannot parse {s:?} as a number")))
        })
        .collect()
}

fn sim_base(args: &SimulateArgs) -> Result<(PopulationModel, DVector<f64>)> {
    match (&args.returns, &args.factors) {
        (Some(r), Some(f)) => {
            let ds = align(&load_csv(r, PanelKind::Returns)?, &load_csv(f, PanelKind::Factors)?)?;
            let fp = estimate_first_pass(&ds)?;
            let pm = calibrate(&fp, DVector::from_element(fp.k(), args.lambda), EDirection::Residual)?;
            Ok((pm, fp.fbar.clone()))
        }
        _ => {
            let pm = synthetic_model(args.n, args.k)?;
            let scaled = PopulationModel::new(
                pm.beta.clone(),
                DVector::from_element(args.k, args.lambda),
                pm.e_tilde.clone(),
                pm.omega.clone(),
                pm.qff.clone(),
            )?;
            Ok((scaled, DVector::zeros(args.k)))
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<Value> {
    let (base, mu_f) = sim_base(args)?;
    let test = match args.test {
        TestArg::FmT => SimTest::FmT,
        TestArg::ShankenT => SimTest::ShankenT,
        TestArg::Drlm => SimTest::Drlm,
        TestArg::DrlmPower => SimTest::DrlmPower,
    };
    let spec_at = |bs: f64, es: f64| DgpSpec::new(&base, mu_f.clone(), args.t, args.seed, bs, es);
    match args.experiment {
        Experiment::SizeSurface => {
            let rule = match args.h0 {
                H0Arg::Zero => H0Rule::Zero,
                H0Arg::PseudoTrueFm => H0Rule::PseudoTrueFm,
                H0Arg::PseudoTrueCue => H0Rule::PseudoTrueCue,
            };
            let bs = parse_list("--beta-scales", &args.beta_scales)?;
            let es = parse_list("--e-scales", &args.e_scales)?;
            let grid: Vec<(f64, f64)> = bs.iter().flat_map(|&b| es.iter().map(move |&e| (b, e))).collect();
            let spec = spec_at(base.beta_scale(), base.e_scale())?;
            let surface = rejection_surface(&spec, &grid, test, rule, args.reps, args.alpha)?;
            if let Some(path) = &args.csv {
                write_file(path, &surface.to_csv())?;
            }
            to_value(&surface)
        }
        Experiment::PowerCurve => {
            let offsets = parse_list("--offsets", &args.offsets)?;
            let spec = spec_at(args.beta_scale, args.e_scale)?;
            let points = power_curve(&spec, test, &offsets, args.reps, args.alpha)?;
            if let Some(path) = &args.csv {
                let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
                let mut out = String::from("offset,rate,mc_se\n");
                for p in &points {
                    out.push_str(&format!("{:?},{},{}\n", p.offset, opt(p.rate), opt(p.mc_se)));
                }
                write_file(path, &out)?;
            }
            Ok(json!({
                "test": test,
                "beta_scale": args.beta_scale,
                "e_scale": args.e_scale,
                "reps": args.reps,
                "alpha": args.alpha,
                "t": args.t,
                "seed": args.seed,
                "points": points,
            }))
        }
        Experiment::Contours => {
            let bs = parse_list("--beta-scales", &args.beta_scales)?;
            let es = parse_list("--e-scales", &args.e_scales)?;
            let surface = pseudo_true_contours(&base, &bs, &es)?;
            if let Some(path) = &args.csv {
                write_file(path, &surface.to_csv())?;
            }
            to_value(&surface)
        }
        Experiment::Theorem2 => {
            let spec = spec_at(args.beta_scale, args.e_scale)?;
            let summary = theorem2_decomposition(&spec, args.reps)?;
            if let Some(path) = &args.csv {
                let mut out = String::from("component,mean,se,max_abs\n");
                for (name, c) in [
                    ("component2", summary.component2),
                    ("component3", summary.component3),
                    ("component4", summary.component4),
                    ("limit_sum", summary.limit_sum),
                    ("direct", summary.direct),
                ] {
                    out.push_str(&format!("{name},{:?},{:?},{:?}\n", c.mean, c.se, c.max_abs));
                }
                write_file(path, &out)?;
            }
            to_value(&summary)
        }
    }
}

/// Factor-zoo panels may hold far more factors than test assets.
fn load_zoo(data: &DataArgs) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>, ZeroBetaMode)> {
    check_zero_beta(data)?;
    let returns = load_csv(&data.returns, PanelKind::Returns)?;
    let factors = load_csv(&data.factors, PanelKind::Factors)?;
    let (_, r, f) = align_matrices(&returns, &factors)?;
    let (r, mode) = match (data.zero_beta, &data.reference) {
        (_, Some(name)) => {
            let j = returns.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownColumn(name.clone()))?;
            if r.ncols() < 2 {
                return Err(Error::InvalidInput("reference differencing needs at least two assets".into()));
            }
            let reference = r.column(j).into_owned();
            let mut kept = r.remove_column(j);
            for mut c in kept.column_iter_mut() {
                c -= &reference;
            }
            (kept, ZeroBetaMode::ReferenceDifferenced)
        }
        (ZeroBetaArg::Zero, None) => (r, ZeroBetaMode::ImposedZero),
        (_, None) => (r, ZeroBetaMode::InterceptEstimated),
    };
    Ok((r, f, factors.names, mode))
}

fn parse_shard(raw: &str) -> Result<(u64, u64)> {
    let bad = || Error::InvalidInput(format!("--shard must look like i/n, got {raw:?}"));
    let (i, n) = raw.split_once('/').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
}

fn zoo_scan(
    data: &DataArgs,
    k: usize,
    shard: &str,
    out: &Path,
    audit: Option<usize>,
    audit_seed: u64,
    csv: Option<&Path>,
) -> Result<Value> {
    let (index, count) = parse_shard(shard)?;
    let (returns, factors, factor_names, mode) = load_zoo(data)?;
    let store = MomentStore::new(&returns, &factors, mode)?;
    let total = binomial(store.m() as u64, k as u64);
    let (start, end) = shard_range(total, index, count)?;
    log::info!("scanning ranks {start}..{end} of {total}");
    let mut writer = RecordWriter::create(out, k)?;
    let mut kept: Vec<ScanRecord> = Vec::new();
    let (mut written, mut misspecified, mut weak, mut degenerate) = (0u64, 0u64, 0u64, 0u64);
    store.scan_range(k, start, end, |r| {
        written += 1;
        misspecified += u64::from(r.misspecified());
        weak += u64::from(r.weak());
        degenerate += u64::from(r.degenerate());
        writer.write(&r)?;
        if csv.is_some() {
            kept.push(r);
        }
        Ok(())
    })?;
    writer.finish()?;
    if let Some(path) = csv {
        write_file(path, &records_csv(&kept))?;
    }
    let audit_report = audit.map(|n| store.audit(k, n, audit_seed)).transpose()?;
    Ok(json!({
        "k": k,
        "m": store.m(),
        "n": store.n(),
        "t": store.t(),
        "factor_names": factor_names,
        "total_models": total,
        "shard": { "index": index, "count": count, "start": start, "end": end },
        "records_written": written,
        "n_misspecified": misspecified,
        "n_weak": weak,
        "n_degenerate": degenerate,
        "audit": audit_report,
        "zero_beta_mode": mode,
    }))
}

fn zoo_summarize(shards: &[std::path::PathBuf], bins: usize, csv: Option<&Path>) -> Result<Value> {
    let mut k = None;
    let mut records = Vec::new();
    for path in shards {
        let (kk, mut recs) = read_shard(path)?;
        match k {
            None => k = Some(kk),
            Some(prev) if prev != kk => {
                return Err(Error::InvalidInput(format!(
                    "{}: shard has k = {kk} but earlier shards have k = {prev}",
                    path.display()
                )));
            }
            Some(_) => {}
        }
        records.append(&mut recs);
    }
    let summary = summarize(&records, k.unwrap_or(0), bins)?;
    if let Some(path) = csv {
        write_file(path, &summary.histogram_csv())?;
    }
    to_value(&summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_parsing() {
        assert_eq!(parse_shard("2/8").unwrap(), (2, 8));
        assert!(parse_shard("2").is_err());
        assert!(parse_shard("a/b").is_err());
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("--x", "0, 1.5,2").unwrap(), vec![0.0, 1.5, 2.0]);
        assert!(parse_list("--x", "1,nan").is_err());
        assert!(parse_list("--x", "1,,2").is_err());
    }

    #[test]
    fn matrices_render_row_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, f64::INFINITY]);
        assert_eq!(matrix_rows(&m), json!([[1.0, 2.0], [3.0, null]]));
    }
}
