use nalgebra::{DMatrix, DVector};
use premia_core::cue_rank::cue_estimate;
use premia_core::drlm::{axis_range, confidence_set, confidence_set_with, project, CsOptions, DrlmWorkspace, Interval};
use premia_core::first_pass::first_pass_from_panels;
use premia_core::panel_io::ZeroBetaMode;
use premia_core::{chisq, FirstPassEstimates, ShapeClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn one_factor(seed: u64, t: usize, n: usize, beta_scale: f64) -> FirstPassEstimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = draw(n, 1) * beta_scale;
    let mu = &beta * 1.5 + draw(n, 1) * 0.05;
    let f = draw(t, 1);
    let mut r = &f * beta.transpose() + draw(t, n);
    for mut row in r.row_iter_mut() {
        row += mu.transpose();
    }
    first_pass_from_panels(&r, &f).unwrap()
}

/// Dense DRLM profile and, for each dense point, the largest value between
/// it and the CUE. Every segment to the CUE is a sub-interval in one dimension.
fn segment_peaks(ws: &DrlmWorkspace, lo: f64, hi: f64, step: f64, cue: f64) -> (Vec<f64>, Vec<f64>) {
    let xs = axis_range(lo, hi, step).unwrap();
    let vals: Vec<f64> = xs.iter().map(|x| ws.stat(&DVector::from_element(1, *x)).unwrap()).collect();
    let c = xs.partition_point(|x| *x < cue).min(xs.len() - 1);
    let mut peak = vec![0.0; xs.len()];
    let mut run = f64::NEG_INFINITY;
    for i in (0..=c).rev() {
        run = run.max(vals[i]);
        peak[i] = run;
    }
    run = f64::NEG_INFINITY;
    for i in c..xs.len() {
        run = run.max(vals[i]);
        peak[i] = peak[i].max(run);
    }
    (xs, peak)
}

#[test]
fn far_stationary_point_is_removed_by_the_power_rule() {
    // Weak loadings give a DRLM curve with a second zero far from the CUE;
    // the raw set keeps a separate island there, the rule must drop it.
    let axes = vec![axis_range(-60.0, 60.0, 0.1).unwrap()];
    let mut islands_removed = 0;
    for seed in 0..40 {
        let fp = one_factor(seed, 240, 6, 0.15);
        let Ok(cue) = cue_estimate(&fp, ZeroBetaMode::ImposedZero) else { continue };
        let cue = cue.lambda_f[0];
        let raw = confidence_set_with(&fp, ZeroBetaMode::ImposedZero, &axes, &CsOptions { power_rule: false, ..CsOptions::default() }).unwrap();
        let fin = confidence_set(&fp, ZeroBetaMode::ImposedZero, &axes, 0.05).unwrap();
        let ws = DrlmWorkspace::new(&fp).unwrap();
        let critical = chisq::critical_value(0.05, 1.0);

        let raw_runs = project(&raw, 0).unwrap();
        let fin_runs = project(&fin, 0).unwrap();
        assert!(fin_runs.len() <= 1, "seed {seed}: rule leaves {fin_runs:?}");
        if raw_runs.len() > 1 {
            islands_removed += 1;
        }
        if cue.abs() >= 59.0 {
            continue;
        }
        let (dense, peaks) = segment_peaks(&ws, -60.0, 60.0, 0.005, cue);
        for (i, x) in axes[0].iter().enumerate() {
            let peak = peaks[dense.partition_point(|d| *d < *x - 1e-9).min(dense.len() - 1)];
            if !raw.reject_raw[i] && peak > critical * 1.05 {
                assert!(fin.reject_final[i], "seed {seed}: {x} kept though its segment peaks at {peak}");
            }
            if !raw.reject_raw[i] && peak < critical * 0.95 {
                assert!(!fin.reject_final[i], "seed {seed}: {x} dropped though its segment peaks at {peak}");
            }
        }
    }
    assert!(islands_removed >= 3, "only {islands_removed} datasets had a far island");
}

fn endpoints(runs: &[Interval]) -> Vec<f64> {
    runs.iter().flat_map(|r| [r.lo, r.hi]).collect()
}

#[test]
fn halving_the_step_moves_endpoints_at_most_one_coarse_step() {
    let mut checked = 0;
    for seed in 0..20 {
        let fp = one_factor(seed, 400, 10, 1.0);
        let coarse_step = 0.02;
        let coarse = vec![axis_range(-2.0, 5.0, coarse_step).unwrap()];
        let fine = vec![axis_range(-2.0, 5.0, coarse_step / 2.0).unwrap()];
        let a = confidence_set(&fp, ZeroBetaMode::ImposedZero, &coarse, 0.05).unwrap();
        if a.shape_class != ShapeClass::BoundedConvex {
            continue;
        }
        let b = confidence_set(&fp, ZeroBetaMode::ImposedZero, &fine, 0.05).unwrap();
        let (ea, eb) = (endpoints(&project(&a, 0).unwrap()), endpoints(&project(&b, 0).unwrap()));
        assert_eq!(ea.len(), eb.len(), "seed {seed}");
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() <= coarse_step + 1e-9, "seed {seed}: {x} vs {y}");
        }
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} bounded sets");
}

#[test]
fn two_factor_halving_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = draw(12, 2);
    let mu = &beta * DMatrix::from_column_slice(2, 1, &[0.5, -0.3]);
    let f = draw(600, 2);
    let mut r = &f * beta.transpose() + draw(600, 12);
    for mut row in r.row_iter_mut() {
        row += mu.transpose();
    }
    let fp = first_pass_from_panels(&r, &f).unwrap();
    let coarse: Vec<Vec<f64>> = (0..2).map(|_| axis_range(-1.5, 1.5, 0.04).unwrap()).collect();
    let fine: Vec<Vec<f64>> = (0..2).map(|_| axis_range(-1.5, 1.5, 0.02).unwrap()).collect();
    let a = confidence_set(&fp, ZeroBetaMode::ImposedZero, &coarse, 0.05).unwrap();
    let b = confidence_set(&fp, ZeroBetaMode::ImposedZero, &fine, 0.05).unwrap();
    assert_eq!(a.shape_class, ShapeClass::BoundedConvex);
    for axis in 0..2 {
        let (ea, eb) = (endpoints(&project(&a, axis).unwrap()), endpoints(&project(&b, axis).unwrap()));
        assert_eq!(ea.len(), eb.len());
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() <= 0.04 + 1e-9, "axis {axis}: {x} vs {y}");
        }
    }
}
