#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_premia"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("PREMIA_THREADS").output().expect("spawn premia")
}

pub fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "premia {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_panel(path: &Path, names: &[String], cols: &[Vec<f64>]) {
    let t = cols[0].len();
    let mut s = String::from("date");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for i in 0..t {
        write!(s, "{}", 200_000 + i).unwrap();
        for c in cols {
            write!(s, ",{:?}", c[i]).unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

/// Deterministic pseudo-noise in (-1, 1).
fn wiggle(i: usize, j: usize) -> f64 {
    let x = ((i as f64 + 1.0) * 12.9898 + (j as f64 + 1.0) * 78.233).sin() * 43_758.545_3;
    2.0 * (x - x.floor()) - 1.0
}

/// Removes the constant and the given columns from `v` by Gram-Schmidt.
fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    let t = v.len() as f64;
    let mean = v.iter().sum::<f64>() / t;
    v.iter_mut().for_each(|x| *x -= mean);
    for a in against {
        let am = a.iter().sum::<f64>() / t;
        let ad: Vec<f64> = a.iter().map(|x| x - am).collect();
        let coef = v.iter().zip(&ad).map(|(x, y)| x * y).sum::<f64>() / ad.iter().map(|y| y * y).sum::<f64>();
        v.iter_mut().zip(&ad).for_each(|(x, y)| *x -= coef * y);
    }
}

/// `t x n` returns on `k` factors with distinct betas, a pricing error and
/// noise; files `r.csv` and `f.csv` in `dir`.
pub fn write_dataset(dir: &Path, t: usize, n: usize, k: usize) -> (PathBuf, PathBuf) {
    let factors: Vec<Vec<f64>> = (0..k).map(|j| (0..t).map(|i| 0.4 + 2.0 * wiggle(i, 100 + j)).collect()).collect();
    let returns: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..t)
                .map(|i| {
                    let mut r = 0.2 + 0.1 * ((a as f64) * 0.9).cos();
                    for (j, f) in factors.iter().enumerate() {
                        r += (0.5 + 0.3 * ((a * (j + 2)) as f64).sin()) * f[i];
                    }
                    r + wiggle(i, a)
                })
                .collect()
        })
        .collect();
    let rn: Vec<String> = (0..n).map(|a| format!("p{a}")).collect();
    let fnames: Vec<String> = (0..k).map(|j| format!("f{j}")).collect();
    let (rp, fp) = (dir.join("r.csv"), dir.join("f.csv"));
    write_panel(&rp, &rn, &returns);
    write_panel(&fp, &fnames, &factors);
    (rp, fp)
}

/// Every asset loads exactly 1 on a single factor, so the cross-section has
/// a constant beta column next to the intercept.
pub fn write_constant_beta(dir: &Path, t: usize, n: usize) -> (PathBuf, PathBuf) {
    let f: Vec<f64> = (0..t).map(|i| wiggle(i, 500)).collect();
    let returns: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            let mut e: Vec<f64> = (0..t).map(|i| wiggle(i, a)).collect();
            orthogonalize(&mut e, std::slice::from_ref(&f));
            (0..t).map(|i| 0.1 * a as f64 + f[i] + e[i]).collect()
        })
        .collect();
    let rn: Vec<String> = (0..n).map(|a| format!("p{a}")).collect();
    let (rp, fp) = (dir.join("r.csv"), dir.join("f.csv"));
    write_panel(&rp, &rn, &returns);
    write_panel(&fp, &["mkt".to_string()], &[f]);
    (rp, fp)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.schema.json"))
}
