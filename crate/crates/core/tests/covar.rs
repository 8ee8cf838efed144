mod common;

use qbreak::covar::{
    backward_covar_estimates, covar_paths, fit_covar, fit_covar_with, forward_covar_estimates,
    min_selected_rows, Selection,
};
use qbreak::regression::{fit_quantile, fit_subset, forward_estimates};
use qbreak::{Dataset, Error};
use rand::Rng;
use rand_distr::StandardNormal;

use common::{random_covar_dataset, rng};

#[test]
fn independent_normals_give_unconditional_quantile() {
    let mut r = rng(21);
    let n = 2000;
    let y: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let z: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.sample(StandardNormal)]).collect();
    let d = Dataset::new(y, Some(z), &x).unwrap();
    let f = fit_covar(&d, 0..n, 0.9, 0.9).unwrap();
    // Phi^{-1}(0.9); about 200 selected rows give a standard error near 0.12.
    assert!(
        (f.covar_coef[0] - 1.281_551_6).abs() < 0.35,
        "{:?}",
        f.covar_coef
    );
    assert!(f.covar_coef[1].abs() < 0.35);
    let frac = f.n_selected as f64 / n as f64;
    assert!((0.08..=0.12).contains(&frac), "selected fraction {frac}");
}

#[test]
fn step_two_is_a_quantile_fit_on_the_exceedances() {
    let mut r = rng(22);
    let d = random_covar_dataset(&mut r, 300, 2, 0.5);
    let f = fit_covar(&d, 0..300, 0.8, 0.7).unwrap();
    let q = fit_quantile(&d, 0..300, 0.8, None).unwrap();
    assert_eq!(f.qr.coef, q.coef);
    let fitted = d.fitted(&q.coef);
    let rows: Vec<usize> = (0..300).filter(|&t| d.y()[t] - fitted[t] > 1e-6).collect();
    let oracle = fit_subset(&d, d.z().unwrap(), &rows, 0.7).unwrap();
    for (a, b) in f.covar_coef.iter().zip(&oracle.coef) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(f.stacked().len(), 6);
}

#[test]
fn z_scaling_and_affine_equivariance() {
    let mut r = rng(23);
    let d = random_covar_dataset(&mut r, 250, 1, 0.4);
    let base = fit_covar(&d, 0..250, 0.85, 0.75).unwrap();
    let z2: Vec<f64> = (0..250)
        .map(|t| 3.0 * d.z().unwrap()[t] + d.row(t)[0] * 1.5 - d.row(t)[1] * 0.5)
        .collect();
    let f = fit_covar(&d.with_z(z2).unwrap(), 0..250, 0.85, 0.75).unwrap();
    assert!((3.0 * base.covar_coef[0] + 1.5 - f.covar_coef[0]).abs() < 1e-8);
    assert!((3.0 * base.covar_coef[1] - 0.5 - f.covar_coef[1]).abs() < 1e-8);
    // Rescaling y moves step one but not the selected rows.
    let y2: Vec<f64> = d.y().iter().map(|v| 2.0 * v).collect();
    let g = fit_covar(&d.with_y(y2).unwrap(), 0..250, 0.85, 0.75).unwrap();
    assert_eq!(g.n_selected, base.n_selected);
    for (a, b) in g.covar_coef.iter().zip(&base.covar_coef) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn select_all_matches_plain_quantile_of_z() {
    let mut r = rng(24);
    let d = random_covar_dataset(&mut r, 200, 2, 0.3);
    let f = fit_covar_with(&d, 0..200, 0.9, 0.6, Selection::All).unwrap();
    let swapped = d.swap_responses().unwrap();
    let q = fit_quantile(&swapped, 0..200, 0.6, None).unwrap();
    for (a, b) in f.covar_coef.iter().zip(&q.coef) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn sequence_lengths_and_endpoints() {
    let mut r = rng(25);
    let d = random_covar_dataset(&mut r, 500, 1, 0.5);
    let fwd = forward_covar_estimates(&d, 0.9, 0.9, 0.1).unwrap();
    assert_eq!(fwd.len(), 451);
    let bwd = backward_covar_estimates(&d, 0.9, 0.9, 0.1).unwrap();
    assert_eq!(bwd.len(), 451);
    let full = fit_covar(&d, 0..500, 0.9, 0.9).unwrap();
    assert_eq!(fwd.last().unwrap().as_ref().unwrap(), &full);
    assert_eq!(bwd[0].as_ref().unwrap(), &full);
    // Each window's step-two sample is about a tenth of the window.
    for f in fwd.iter().skip(100).flatten() {
        let len = f.qr.window.1 - f.qr.window.0;
        let frac = f.n_selected as f64 / len as f64;
        assert!((0.05..=0.15).contains(&frac), "{frac} at {len}");
    }
    // Step one along the CoVaR path is the plain forward sequence.
    let q = forward_estimates(&d, 0.9, 0.1).unwrap();
    let paths = covar_paths(&d, 0.9, 0.9, 0.1).unwrap();
    for ((a, _), b) in paths.forward.iter().zip(&q) {
        assert_eq!(a.coef, b.coef);
    }
    let failures = fwd.iter().chain(&bwd).filter(|f| f.is_none()).count();
    assert_eq!(failures, paths.step_two_failures);
}

#[test]
fn short_windows_report_too_few_exceedances() {
    let mut r = rng(26);
    let d = random_covar_dataset(&mut r, 40, 2, 0.5);
    match fit_covar(&d, 0..40, 0.95, 0.9) {
        Err(Error::TooFewExceedances { selected, min }) => {
            assert_eq!(min, min_selected_rows(2));
            assert!(selected < min);
        }
        other => panic!("unexpected {other:?}"),
    }
}
