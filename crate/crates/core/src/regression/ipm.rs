//! Primal-dual interior point (Mehrotra predictor-corrector) for the
//! bounded-variable dual of the quantile-regression LP:
//!
//! ```text
//! min  -y'a   s.t.  X'a = (1 - alpha) X'1,   0 <= a <= 1
//! ```
//!
//! The multiplier of the equality constraint is `-beta`.

use super::simplex::Problem;
use crate::error::{Error, Result};
use crate::linalg;

pub(crate) const GAP_TOL: f64 = 1e-9;
pub(crate) const MAX_ITER: usize = 200;

const STEP_DAMP: f64 = 0.99995;

pub(crate) fn solve(prob: &Problem<'_>) -> Result<Vec<f64>> {
    let p = prob.p;
    let n = prob.rows.len();
    let alpha = prob.alpha;

    let beta_ls = least_squares(prob)?;

    // b = (1 - alpha) X'1; x0 = (1 - alpha) 1 is primal feasible.
    let mut b = vec![0.0; p];
    for &t in prob.rows {
        for (bi, xi) in b.iter_mut().zip(prob.row(t)) {
            *bi += (1.0 - alpha) * xi;
        }
    }
    let mut xv = vec![1.0 - alpha; n];
    let mut tv = vec![alpha; n];
    let mut w: Vec<f64> = beta_ls.iter().map(|v| -v).collect();

    let mut resid = vec![0.0; n];
    for (i, &t) in prob.rows.iter().enumerate() {
        resid[i] = prob.y[t] + linalg::dot(prob.row(t), &w);
    }
    let mean_abs = resid.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let shift = (0.1 * mean_abs).max(1e-6 * (1.0 + prob.y_scale()));
    // s - z = y - X beta keeps the dual equality exact.
    let mut sv: Vec<f64> = resid.iter().map(|&r| r.max(0.0) + shift).collect();
    let mut zv: Vec<f64> = resid.iter().map(|&r| (-r).max(0.0) + shift).collect();

    let mut dx = vec![0.0; n];
    let mut dt = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut rho = vec![0.0; n];
    let mut dvec = vec![0.0; n];
    let mut rc = vec![0.0; n];
    let mut ru = vec![0.0; n];
    let mut rxz = vec![0.0; n];
    let mut rts = vec![0.0; n];
    let mut m = vec![0.0; p * p];
    let mut dw = vec![0.0; p];

    let mut gap = f64::INFINITY;
    for _ in 0..MAX_ITER {
        gap = linalg::dot(&xv, &zv) + linalg::dot(&tv, &sv);
        let primal_obj: f64 = prob
            .rows
            .iter()
            .zip(&xv)
            .map(|(&t, a)| -prob.y[t] * a)
            .sum();
        let rel_gap = gap / (1.0 + primal_obj.abs());

        let mut rb = b.clone();
        for (i, &t) in prob.rows.iter().enumerate() {
            let row = prob.row(t);
            for (rbj, xj) in rb.iter_mut().zip(row) {
                *rbj -= xj * xv[i];
            }
            rc[i] = -prob.y[t] - linalg::dot(row, &w) - zv[i] + sv[i];
            ru[i] = 1.0 - xv[i] - tv[i];
        }
        let infeas = rb.iter().map(|v| v.abs()).fold(0.0, f64::max)
            + rc.iter().map(|v| v.abs()).fold(0.0, f64::max) / (1.0 + prob.y_scale());
        if rel_gap < GAP_TOL && infeas < 1e-7 {
            return Ok(w.iter().map(|v| -v).collect());
        }
        let mu = gap / (2 * n) as f64;

        for i in 0..n {
            dvec[i] = 1.0 / (zv[i] / xv[i] + sv[i] / tv[i]);
        }
        m.iter_mut().for_each(|v| *v = 0.0);
        for (i, &t) in prob.rows.iter().enumerate() {
            let row = prob.row(t);
            for a in 0..p {
                let f = dvec[i] * row[a];
                for c in 0..=a {
                    m[a * p + c] += f * row[c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                m[c * p + a] = m[a * p + c];
            }
        }
        let mut chol = m.clone();
        if !linalg::cholesky_in_place(&mut chol, p) {
            return Err(Error::RankDeficientDesign);
        }

        // Predictor.
        for i in 0..n {
            rxz[i] = -xv[i] * zv[i];
            rts[i] = -tv[i] * sv[i];
        }
        newton_direction(
            prob, &chol, &rb, &rc, &ru, &rxz, &rts, &xv, &tv, &zv, &sv, &dvec, &mut rho, &mut dw,
            &mut dx, &mut dt, &mut dz, &mut ds,
        );
        let ap = step_length(&xv, &dx).min(step_length(&tv, &dt));
        let ad = step_length(&zv, &dz).min(step_length(&sv, &ds));
        let mut mu_aff = 0.0;
        for i in 0..n {
            mu_aff += (xv[i] + ap * dx[i]) * (zv[i] + ad * dz[i])
                + (tv[i] + ap * dt[i]) * (sv[i] + ad * ds[i]);
        }
        mu_aff /= (2 * n) as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);

        // Corrector.
        for i in 0..n {
            rxz[i] = sigma * mu - xv[i] * zv[i] - dx[i] * dz[i];
            rts[i] = sigma * mu - tv[i] * sv[i] - dt[i] * ds[i];
        }
        newton_direction(
            prob, &chol, &rb, &rc, &ru, &rxz, &rts, &xv, &tv, &zv, &sv, &dvec, &mut rho, &mut dw,
            &mut dx, &mut dt, &mut dz, &mut ds,
        );
        let ap = (STEP_DAMP * step_length(&xv, &dx).min(step_length(&tv, &dt))).min(1.0);
        let ad = (STEP_DAMP * step_length(&zv, &dz).min(step_length(&sv, &ds))).min(1.0);
        for i in 0..n {
            xv[i] += ap * dx[i];
            tv[i] += ap * dt[i];
            zv[i] += ad * dz[i];
            sv[i] += ad * ds[i];
        }
        for (wj, dj) in w.iter_mut().zip(&dw) {
            *wj += ad * dj;
        }
    }
    let primal_obj: f64 = prob
        .rows
        .iter()
        .zip(&xv)
        .map(|(&t, a)| -prob.y[t] * a)
        .sum();
    Err(Error::SolverNonConvergence {
        iterations: MAX_ITER,
        gap: gap / (1.0 + primal_obj.abs()),
    })
}

#[allow(clippy::too_many_arguments)]
fn newton_direction(
    prob: &Problem<'_>,
    chol: &[f64],
    rb: &[f64],
    rc: &[f64],
    ru: &[f64],
    rxz: &[f64],
    rts: &[f64],
    xv: &[f64],
    tv: &[f64],
    zv: &[f64],
    sv: &[f64],
    dvec: &[f64],
    rho: &mut [f64],
    dw: &mut [f64],
    dx: &mut [f64],
    dt: &mut [f64],
    dz: &mut [f64],
    ds: &mut [f64],
) {
    let p = prob.p;
    dw.copy_from_slice(rb);
    for (i, &t) in prob.rows.iter().enumerate() {
        rho[i] = rc[i] - rxz[i] / xv[i] + (rts[i] - sv[i] * ru[i]) / tv[i];
        let f = dvec[i] * rho[i];
        for (dwj, xj) in dw.iter_mut().zip(prob.row(t)) {
            *dwj += f * xj;
        }
    }
    // Solve with the precomputed Cholesky factor.
    for i in 0..p {
        let mut s = dw[i];
        for k in 0..i {
            s -= chol[i * p + k] * dw[k];
        }
        dw[i] = s / chol[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = dw[i];
        for k in i + 1..p {
            s -= chol[k * p + i] * dw[k];
        }
        dw[i] = s / chol[i * p + i];
    }
    for (i, &t) in prob.rows.iter().enumerate() {
        dx[i] = dvec[i] * (linalg::dot(prob.row(t), dw) - rho[i]);
        dt[i] = ru[i] - dx[i];
        dz[i] = (rxz[i] - zv[i] * dx[i]) / xv[i];
        ds[i] = (rts[i] - sv[i] * dt[i]) / tv[i];
    }
}

fn step_length(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn least_squares(prob: &Problem<'_>) -> Result<Vec<f64>> {
    let p = prob.p;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for &t in prob.rows {
        let row = prob.row(t);
        for a in 0..p {
            xty[a] += row[a] * prob.y[t];
            for c in 0..p {
                xtx[a * p + c] += row[a] * row[c];
            }
        }
    }
    if !linalg::spd_solve(&mut xtx, p, &mut xty) {
        return Err(Error::RankDeficientDesign);
    }
    Ok(xty)
}
