//! Two-step predictive CoVaR regression on subsamples.
//!
//! Step one fits the `alpha`-quantile regression of `y` on the window. Step
//! two fits the `beta`-quantile regression of `z` on the window rows whose
//! `y` lies strictly above the step-one fitted quantile.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::regression::{
    self, check_level, min_window_len, trim_index, zero_tolerance, QuantileFit, WarmFitter,
};

/// Smallest step-two sample: `max(3 (k + 1), 8)` rows.
pub fn min_selected_rows(k: usize) -> usize {
    (3 * (k + 1)).max(8)
}

/// Which window rows enter the step-two fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Rows with `y_t > X_t' alpha_hat` beyond the zero tolerance.
    Exceedances,
    /// Every row; the CoVaR collapses to the plain `beta`-quantile of `z`.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoVaRFit {
    pub qr: QuantileFit,
    pub covar_coef: Vec<f64>,
    pub n_selected: usize,
    pub beta: f64,
    /// Step-two optimal vertex rows.
    pub covar_basis: Vec<usize>,
}

impl CoVaRFit {
    /// `(alpha_hat', beta_hat')'`.
    pub fn stacked(&self) -> Vec<f64> {
        self.qr
            .coef
            .iter()
            .chain(&self.covar_coef)
            .copied()
            .collect()
    }
}

struct TwoStep<'a> {
    data: &'a Dataset,
    alpha: f64,
    beta: f64,
    selection: Selection,
    qr: WarmFitter<'a>,
    covar: WarmFitter<'a>,
}

impl<'a> TwoStep<'a> {
    fn new(data: &'a Dataset, alpha: f64, beta: f64, selection: Selection) -> Result<Self> {
        let z = data.z().ok_or(Error::MissingZ)?;
        check_level("alpha", alpha)?;
        check_level("beta", beta)?;
        Ok(TwoStep {
            data,
            alpha,
            beta,
            selection,
            qr: WarmFitter::new(data, data.y(), alpha),
            covar: WarmFitter::new(data, z, beta),
        })
    }

    fn fit(&mut self, rows: &[usize]) -> Result<CoVaRFit> {
        let (qr, covar) = self.fit_steps(rows)?;
        covar.map(|(coef, n_selected, basis)| CoVaRFit {
            qr,
            covar_coef: coef,
            n_selected,
            beta: self.beta,
            covar_basis: basis,
        })
    }

    /// Outer error: step one failed. Inner error: step two failed.
    #[allow(clippy::type_complexity)]
    fn fit_steps(
        &mut self,
        rows: &[usize],
    ) -> Result<(QuantileFit, Result<(Vec<f64>, usize, Vec<usize>)>)> {
        let window = (rows[0], rows[rows.len() - 1] + 1);
        let v = self.qr.fit(rows)?;
        let y = self.data.y();
        let selected: Vec<usize> = match self.selection {
            Selection::All => rows.to_vec(),
            Selection::Exceedances => {
                let tol = zero_tolerance(rows.iter().map(|&t| y[t].abs()).fold(0.0, f64::max));
                rows.iter()
                    .copied()
                    .filter(|&t| y[t] - linalg::dot(self.data.row(t), &v.coef) > tol)
                    .collect()
            }
        };
        let qr = QuantileFit {
            coef: v.coef,
            window,
            alpha: self.alpha,
            objective: v.objective,
            n_active: v.n_active,
            basis: v.basis,
        };
        let min = min_selected_rows(self.data.k());
        if selected.len() < min {
            let err = Error::TooFewExceedances {
                selected: selected.len(),
                min,
            };
            return Ok((qr, Err(err)));
        }
        let covar = self
            .covar
            .fit(&selected)
            .map(|c| (c.coef, selected.len(), c.basis));
        Ok((qr, covar))
    }
}

fn check_window(data: &Dataset, window: &Range<usize>) -> Result<()> {
    if window.start >= window.end || window.end > data.n() {
        return Err(Error::InvalidParameter(format!(
            "window {}..{} outside 0..{}",
            window.start,
            window.end,
            data.n()
        )));
    }
    let min = min_window_len(data.k());
    if window.len() < min {
        return Err(Error::WindowTooShort {
            len: window.len(),
            min,
        });
    }
    Ok(())
}

pub fn fit_covar(data: &Dataset, window: Range<usize>, alpha: f64, beta: f64) -> Result<CoVaRFit> {
    fit_covar_with(data, window, alpha, beta, Selection::Exceedances)
}

pub fn fit_covar_with(
    data: &Dataset,
    window: Range<usize>,
    alpha: f64,
    beta: f64,
    selection: Selection,
) -> Result<CoVaRFit> {
    let mut two = TwoStep::new(data, alpha, beta, selection)?;
    check_window(data, &window)?;
    let rows: Vec<usize> = window.collect();
    two.fit(&rows)
}

/// Step-two failures (too few exceedances, degenerate selected design)
/// become `None`; anything else aborts.
fn soften(r: Result<CoVaRFit>) -> Result<Option<CoVaRFit>> {
    match r {
        Ok(f) => Ok(Some(f)),
        Err(Error::TooFewExceedances { .. }) | Err(Error::RankDeficientDesign) => Ok(None),
        Err(e) => Err(e),
    }
}

fn trim(data: &Dataset, epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let lo = trim_index(data.n(), epsilon);
    let min = min_window_len(data.k());
    if lo < min {
        return Err(Error::WindowTooShort { len: lo, min });
    }
    Ok(lo)
}

/// Windows `0 .. j` for `j = floor(n eps) ..= n`.
pub fn forward_covar_estimates(
    data: &Dataset,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<Vec<Option<CoVaRFit>>> {
    let mut two = TwoStep::new(data, alpha, beta, Selection::Exceedances)?;
    let lo = trim(data, epsilon)?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    (lo..=n)
        .map(|j| soften(two.fit(&all[..j])).map_err(|e| e.at_index(j)))
        .collect()
}

/// Windows `j .. n` for `j = 0 ..= n - floor(n eps)`.
pub fn backward_covar_estimates(
    data: &Dataset,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<Vec<Option<CoVaRFit>>> {
    let mut two = TwoStep::new(data, alpha, beta, Selection::Exceedances)?;
    let lo = trim(data, epsilon)?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let mut fits: Vec<Option<CoVaRFit>> = (0..=n - lo)
        .rev()
        .map(|j| soften(two.fit(&all[j..])).map_err(|e| e.at_index(j)))
        .collect::<Result<_>>()?;
    fits.reverse();
    Ok(fits)
}

/// Both steps along the forward and backward window sequences.
#[derive(Clone, Debug)]
pub struct CovarPaths {
    /// Entry `i` is window `0 .. floor(n eps) + i`.
    pub forward: Vec<(QuantileFit, Option<Vec<f64>>)>,
    /// Entry `j` is window `j .. n`.
    pub backward: Vec<(QuantileFit, Option<Vec<f64>>)>,
    pub lo: usize,
    /// Number of windows whose step two failed.
    pub step_two_failures: usize,
}

/// Runs both window sequences once, keeping step-one fits even where step
/// two fails so the quantile-only statistic can share the work.
pub fn covar_paths(data: &Dataset, alpha: f64, beta: f64, epsilon: f64) -> Result<CovarPaths> {
    let lo = trim(data, epsilon)?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let mut failures = 0;
    let mut run = |two: &mut TwoStep<'_>, rows: &[usize], j: usize| {
        let (qr, covar) = two.fit_steps(rows).map_err(|e| e.at_index(j))?;
        let covar = match covar {
            Ok((coef, _, _)) => Some(coef),
            Err(Error::TooFewExceedances { .. }) | Err(Error::RankDeficientDesign) => {
                failures += 1;
                None
            }
            Err(e) => return Err(e.at_index(j)),
        };
        Ok((qr, covar))
    };
    let mut two = TwoStep::new(data, alpha, beta, Selection::Exceedances)?;
    let forward = (lo..=n)
        .map(|j| run(&mut two, &all[..j], j))
        .collect::<Result<Vec<_>>>()?;
    let mut two = TwoStep::new(data, alpha, beta, Selection::Exceedances)?;
    let mut backward = (0..=n - lo)
        .rev()
        .map(|j| run(&mut two, &all[j..], j))
        .collect::<Result<Vec<_>>>()?;
    backward.reverse();
    Ok(CovarPaths {
        forward,
        backward,
        lo,
        step_two_failures: failures,
    })
}

/// Plain step-two quantile fit of `z` on the given rows, used to check the
/// select-all degeneracy.
pub fn fit_z_quantile(data: &Dataset, window: Range<usize>, beta: f64) -> Result<QuantileFit> {
    let z = data.z().ok_or(Error::MissingZ)?;
    let rows: Vec<usize> = window.collect();
    regression::fit_subset(data, z, &rows, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let preds: Vec<Vec<f64>> = (0..n)
            .map(|t| vec![((t * 7919) % 97) as f64 / 97.0])
            .collect();
        let y: Vec<f64> = (0..n).map(|t| ((t * 104_729) % 89) as f64 / 89.0).collect();
        let z: Vec<f64> = (0..n)
            .map(|t| ((t * 1_299_709) % 83) as f64 / 83.0)
            .collect();
        Dataset::new(y, Some(z), &preds).unwrap()
    }

    #[test]
    fn missing_z_is_reported() {
        let d = Dataset::intercept_only((0..30).map(f64::from).collect()).unwrap();
        assert!(matches!(
            fit_covar(&d, 0..30, 0.9, 0.9),
            Err(Error::MissingZ)
        ));
    }

    #[test]
    fn selection_is_strict_exceedance() {
        let d = toy(200);
        let f = fit_covar(&d, 0..200, 0.8, 0.7).unwrap();
        let above = (0..200)
            .filter(|&t| d.y()[t] - linalg::dot(d.row(t), &f.qr.coef) > 1e-6)
            .count();
        assert_eq!(f.n_selected, above);
    }

    #[test]
    fn select_all_is_plain_quantile_of_z() {
        let d = toy(150);
        let f = fit_covar_with(&d, 0..150, 0.9, 0.6, Selection::All).unwrap();
        let q = fit_z_quantile(&d, 0..150, 0.6).unwrap();
        for (a, b) in f.covar_coef.iter().zip(&q.coef) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_eq!(f.n_selected, 150);
    }

    #[test]
    fn too_few_exceedances() {
        let d = toy(30);
        assert!(matches!(
            fit_covar(&d, 0..30, 0.9, 0.9),
            Err(Error::TooFewExceedances { .. })
        ));
    }
}
