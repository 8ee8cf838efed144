mod common;

use qbreak::covar::covar_paths;
use qbreak::limit_sim::{simulate_limit_scalar, simulate_limit_u, SimConfig};
use qbreak::sn::{
    covar_break_test, qr_break_test, qr_paths, sn_break_statistic, sn_significance, stacked_paths,
    two_stage_from_paths, CoefPath, GridSpec, TwoStageOutcome,
};
use qbreak::Error;
use rand::Rng;
use rand_distr::StandardNormal;

use common::{random_covar_dataset, random_dataset, rng};

/// Direct evaluation of the trajectory: builds every normalizer from scratch
/// and inverts it by Gaussian elimination.
fn direct_trajectory(fwd: &CoefPath, bwd: &CoefPath, g: &GridSpec) -> Vec<(f64, f64)> {
    let n = g.n as f64;
    let mut out = Vec::new();
    for j in g.indices() {
        let f = fwd.get(j).unwrap();
        let b = bwd.get(j).unwrap();
        let d = f.len();
        let mut m = vec![vec![0.0; d]; d];
        for i in g.lo..=j {
            let w = (i as f64 / n).powi(2) / n;
            let fi = fwd.get(i).unwrap();
            for a in 0..d {
                for c in 0..d {
                    m[a][c] += w * (fi[a] - f[a]) * (fi[c] - f[c]);
                }
            }
        }
        for i in j..=g.hi {
            let w = (1.0 - i as f64 / n).powi(2) / n;
            let bi = bwd.get(i).unwrap();
            for a in 0..d {
                for c in 0..d {
                    m[a][c] += w * (bi[a] - b[a]) * (bi[c] - b[c]);
                }
            }
        }
        let delta: Vec<f64> = f.iter().zip(b).map(|(x, y)| x - y).collect();
        // Solve m x = delta.
        let mut aug: Vec<Vec<f64>> = m
            .iter()
            .zip(&delta)
            .map(|(row, v)| row.iter().copied().chain([*v]).collect())
            .collect();
        for c in 0..d {
            let piv = (c..d)
                .max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs()))
                .unwrap();
            aug.swap(c, piv);
            for r in 0..d {
                if r != c {
                    let f = aug[r][c] / aug[c][c];
                    for cc in c..=d {
                        aug[r][cc] -= f * aug[c][cc];
                    }
                }
            }
        }
        let q: f64 = (0..d).map(|a| delta[a] * aug[a][d] / aug[a][a]).sum();
        let s = j as f64 / n;
        out.push((s, (s * (1.0 - s)).powi(2) * q));
    }
    out
}

#[test]
fn trajectory_matches_direct_oracle() {
    for (seed, k, n) in [(31, 0, 120), (32, 1, 200), (33, 2, 250)] {
        let mut r = rng(seed);
        let d = random_dataset(&mut r, n, k);
        let g = GridSpec::for_data(&d, 0.1).unwrap();
        let (f, b) = qr_paths(&d, 0.7, &g).unwrap();
        let res = sn_break_statistic(&f, &b, &g).unwrap();
        let oracle = direct_trajectory(&f, &b, &g);
        assert!(res.skipped.is_empty());
        assert_eq!(res.trajectory.len(), oracle.len());
        for (p, (s, v)) in res.trajectory.iter().zip(&oracle) {
            assert_eq!(p.s, *s);
            assert!(
                (p.value - v).abs() <= 1e-7 * v.abs().max(1.0),
                "{} vs {v}",
                p.value
            );
        }
        let max = oracle.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
        assert!((res.statistic - max).abs() <= 1e-7 * max.max(1.0));
        assert_eq!(res.dim, k + 1);
        let first = res
            .trajectory
            .iter()
            .find(|p| p.value == res.statistic)
            .unwrap();
        assert_eq!(first.s, res.argmax_s);
    }
}

#[test]
fn trajectory_is_affine_invariant() {
    let mut r = rng(34);
    let d = random_dataset(&mut r, 300, 2);
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let base = qr_break_test(&d, 0.9, &g).unwrap();
    let y2: Vec<f64> = (0..300)
        .map(|t| 2.0 * d.y()[t] + d.row(t).iter().sum::<f64>())
        .collect();
    let other = qr_break_test(&d.with_y(y2).unwrap(), 0.9, &g).unwrap();
    for (a, b) in base.trajectory.iter().zip(&other.trajectory) {
        assert!((a.value - b.value).abs() <= 1e-6 * a.value.abs().max(1e-12));
    }
}

#[test]
fn detects_a_large_intercept_shift() {
    let mut r = rng(35);
    let mut d = random_dataset(&mut r, 400, 1);
    let y: Vec<f64> = (0..400)
        .map(|t| d.y()[t] + if t >= 200 { 4.0 } else { 0.0 })
        .collect();
    d = d.with_y(y).unwrap();
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let res = qr_break_test(&d, 0.5, &g).unwrap();
    assert!(res.statistic > 500.0, "{}", res.statistic);
    assert!((res.argmax_s - 0.5).abs() < 0.05);
}

#[test]
fn stacked_statistic_with_identical_responses() {
    let mut r = rng(36);
    let base = random_dataset(&mut r, 300, 1);
    let d = base.with_z(base.y().to_vec()).unwrap();
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let paths = covar_paths(&d, 0.8, 0.8, 0.1).unwrap();
    let (f, _) = qr_paths(&d, 0.8, &g).unwrap();
    let (sf, _) = stacked_paths(&paths);
    for j in g.indices() {
        if let Some(v) = sf.get(j) {
            assert_eq!(&v[..2], f.get(j).unwrap());
        }
    }
    match covar_break_test(&d, 0.8, 0.8, &g) {
        Ok(res) => {
            assert!(res.statistic.is_finite());
            assert_eq!(res.dim, 4);
        }
        Err(Error::TooManySkippedPoints { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn two_stage_skips_second_stage_after_quantile_break() {
    let mut r = rng(37);
    let d = random_covar_dataset(&mut r, 400, 1, 0.5);
    let y: Vec<f64> = (0..400)
        .map(|t| d.y()[t] + if t >= 200 { 5.0 } else { 0.0 })
        .collect();
    let d = d.with_y(y).unwrap();
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let table = simulate_limit_u(&SimConfig::new(2, 0.1, 500, 500, 3)).unwrap();
    let paths = covar_paths(&d, 0.5, 0.5, 0.1).unwrap();
    let res = two_stage_from_paths(&paths, &g, 0.1, &table, &table).unwrap();
    assert_eq!(res.outcome, TwoStageOutcome::QuantileUnstable);
    assert!(res.stage_two.is_none());
    assert!((res.stage_level - 0.05).abs() < 1e-15);
    let cv = res.stage_one.decision.unwrap().critical_value;
    assert_eq!(cv, table.critical_value(0.05).unwrap());
}

#[test]
fn break_decision_checks_dimension() {
    let mut r = rng(38);
    let d = random_dataset(&mut r, 200, 1);
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let mut res = qr_break_test(&d, 0.5, &g).unwrap();
    let wrong = simulate_limit_u(&SimConfig::new(3, 0.1, 200, 200, 1)).unwrap();
    assert!(matches!(
        res.decide(&wrong, 0.05),
        Err(Error::DimensionMismatch(_))
    ));
    let right = simulate_limit_u(&SimConfig::new(2, 0.1, 200, 200, 1)).unwrap();
    res.decide(&right, 0.05).unwrap();
    let p = res.p_value.unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(
        res.rejects(),
        Some(res.statistic > right.critical_value(0.05).unwrap())
    );
}

#[test]
fn significance_statistic_is_scale_invariant() {
    let mut r = rng(39);
    let d = random_dataset(&mut r, 300, 1);
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let (f, _) = qr_paths(&d, 0.5, &g).unwrap();
    let base = sn_significance(&f, 1, &g, None).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let d2 = d.with_y(d.y().iter().map(|v| c * v).collect()).unwrap();
        let (f2, _) = qr_paths(&d2, 0.5, &g).unwrap();
        let t = sn_significance(&f2, 1, &g, None).unwrap();
        assert!((t.statistic - base.statistic).abs() <= 1e-8 * base.statistic);
    }
    // Normalizer by hand.
    let n = 300.0;
    let a_n = f.get(300).unwrap()[1];
    let s: f64 = (g.lo..=300)
        .map(|j| (j as f64 / n).powi(2) * (f.get(j).unwrap()[1] - a_n).powi(2))
        .sum::<f64>()
        / n;
    assert!((base.normalizer - s).abs() <= 1e-12 * s);
    assert!((base.statistic - a_n * a_n / s).abs() <= 1e-9 * base.statistic);
}

#[test]
fn significance_p_value_from_scalar_table() {
    let mut r = rng(40);
    let n = 200;
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.sample(StandardNormal)]).collect();
    let y: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let d = qbreak::Dataset::new(y, None, &x).unwrap();
    let g = GridSpec::for_data(&d, 0.1).unwrap();
    let (f, _) = qr_paths(&d, 0.5, &g).unwrap();
    let table = simulate_limit_scalar(&SimConfig::new(1, 0.1, 500, 1000, 2)).unwrap();
    let t = sn_significance(&f, 1, &g, Some(&table)).unwrap();
    let p = t.p_value.unwrap();
    let sample = table.raw_sample.as_ref().unwrap();
    let direct = sample.iter().filter(|&&v| v >= t.statistic).count() as f64 / 1000.0;
    assert_eq!(p, direct);
    let break_table = simulate_limit_u(&SimConfig::new(1, 0.1, 200, 200, 1)).unwrap();
    assert!(sn_significance(&f, 1, &g, Some(&break_table)).is_err());
}
