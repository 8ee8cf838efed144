#![allow(dead_code)]

use qbreak::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian predictors and a linear-plus-noise response.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Dataset {
    let preds: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let y: Vec<f64> = preds
        .iter()
        .map(|row| {
            let e: f64 = rng.sample(StandardNormal);
            0.5 + row.iter().sum::<f64>() * 0.7 + e
        })
        .collect();
    Dataset::new(y, None, &preds).unwrap()
}

fn check_loss(u: f64, alpha: f64) -> f64 {
    if u >= 0.0 {
        alpha * u
    } else {
        (alpha - 1.0) * u
    }
}

/// Solves the square system by Cramer-free elimination with full pivoting.
fn exact_fit(rows: &[&[f64]], rhs: &[f64]) -> Option<Vec<f64>> {
    let p = rhs.len();
    let mut a: Vec<Vec<f64>> = rows
        .iter()
        .zip(rhs)
        .map(|(r, b)| {
            let mut v = r.to_vec();
            v.push(*b);
            v
        })
        .collect();
    let mut perm: Vec<usize> = (0..p).collect();
    for c in 0..p {
        let (mut br, mut bc, mut best) = (c, c, 0.0);
        for r in c..p {
            for cc in c..p {
                if a[r][cc].abs() > best {
                    best = a[r][cc].abs();
                    br = r;
                    bc = cc;
                }
            }
        }
        if best < 1e-12 {
            return None;
        }
        a.swap(c, br);
        for row in a.iter_mut() {
            row.swap(c, bc);
        }
        perm.swap(c, bc);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for cc in c..=p {
                    a[r][cc] -= f * a[c][cc];
                }
            }
        }
    }
    let mut out = vec![0.0; p];
    for c in 0..p {
        out[perm[c]] = a[c][p] / a[c][c];
    }
    Some(out)
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), f);
}

pub fn objective(data: &Dataset, rows: std::ops::Range<usize>, alpha: f64, coef: &[f64]) -> f64 {
    rows.map(|t| {
        let fit: f64 = data.row(t).iter().zip(coef).map(|(a, b)| a * b).sum();
        check_loss(data.y()[t] - fit, alpha)
    })
    .sum()
}

/// Minimum pinball objective over all interpolating (basic) solutions.
pub fn enumeration_minimum(data: &Dataset, alpha: f64) -> (f64, Vec<f64>) {
    let n = data.n();
    let p = data.p();
    let mut best = (f64::INFINITY, Vec::new());
    combinations(n, p, &mut |idx| {
        let rows: Vec<&[f64]> = idx.iter().map(|&t| data.row(t)).collect();
        let rhs: Vec<f64> = idx.iter().map(|&t| data.y()[t]).collect();
        if let Some(coef) = exact_fit(&rows, &rhs) {
            let obj = objective(data, 0..n, alpha, &coef);
            if obj < best.0 {
                best = (obj, coef);
            }
        }
    });
    best
}

/// Like [`random_dataset`] with a second response whose noise has
/// correlation `rho` with that of `y`.
pub fn random_covar_dataset(rng: &mut ChaCha8Rng, n: usize, k: usize, rho: f64) -> Dataset {
    let preds: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for row in &preds {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let s: f64 = row.iter().sum();
        y.push(0.5 + 0.7 * s + e1);
        z.push(-0.2 + 0.3 * s + rho * e1 + (1.0 - rho * rho).sqrt() * e2);
    }
    Dataset::new(y, Some(z), &preds).unwrap()
}
