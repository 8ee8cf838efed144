//! Exact quantile-regression fits on contiguous subsamples.

mod ipm;
pub(crate) mod simplex;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use simplex::{Problem, Start, Vertex};

/// Pinball (check) loss `u (alpha - 1{u < 0})`.
#[inline]
pub fn pinball_loss(u: f64, alpha: f64) -> f64 {
    if u < 0.0 {
        u * (alpha - 1.0)
    } else {
        u * alpha
    }
}

/// Subgradient of the pinball loss, `alpha - 1{u <= 0}`.
#[inline]
pub fn psi(u: f64, alpha: f64) -> f64 {
    if u <= 0.0 {
        alpha - 1.0
    } else {
        alpha
    }
}

/// Smallest subsample a fit accepts: `max(5 (k + 1), 10)` rows.
pub fn min_window_len(k: usize) -> usize {
    (5 * (k + 1)).max(10)
}

/// Residuals at most this large (in magnitude) count as zero.
pub fn zero_tolerance(max_abs_response: f64) -> f64 {
    1e-8 * (1.0 + max_abs_response)
}

/// `floor(n * epsilon)`, guarded against representation error in `epsilon`.
pub fn trim_index(n: usize, epsilon: f64) -> usize {
    (n as f64 * epsilon + 1e-9).floor() as usize
}

pub(crate) fn check_level(name: &str, level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must lie in (0, 1), got {level}"
        )))
    }
}

/// Quantile-regression estimate on the rows `window.0 .. window.1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub coef: Vec<f64>,
    pub window: (usize, usize),
    pub alpha: f64,
    /// Achieved pinball-loss sum.
    pub objective: f64,
    /// Residuals within the zero tolerance.
    pub n_active: usize,
    /// Rows defining the optimal vertex.
    pub basis: Vec<usize>,
}

impl QuantileFit {
    fn from_vertex(v: Vertex, window: (usize, usize), alpha: f64) -> Self {
        QuantileFit {
            coef: v.coef,
            window,
            alpha,
            objective: v.objective,
            n_active: v.n_active,
            basis: v.basis,
        }
    }
}

/// Solves successive problems on one response, warm-starting each from the
/// previous optimal vertex.
pub(crate) struct WarmFitter<'a> {
    data: &'a Dataset,
    response: &'a [f64],
    alpha: f64,
    last: Option<(Vec<usize>, Vec<f64>)>,
}

impl<'a> WarmFitter<'a> {
    pub fn new(data: &'a Dataset, response: &'a [f64], alpha: f64) -> Self {
        WarmFitter {
            data,
            response,
            alpha,
            last: None,
        }
    }

    /// Fits over `rows` (sorted ascending).
    pub fn fit(&mut self, rows: &[usize]) -> Result<Vertex> {
        let tol = zero_tolerance(
            rows.iter()
                .map(|&t| self.response[t].abs())
                .fold(0.0, f64::max),
        );
        let prob = Problem {
            x: self.data.design(),
            y: self.response,
            p: self.data.p(),
            alpha: self.alpha,
            rows,
            tol,
        };
        let start = match &self.last {
            Some((basis, coef)) => Start::Warm { basis, coef },
            None => Start::Cold,
        };
        let v = simplex::solve(&prob, start)?;
        self.last = Some((v.basis.clone(), v.coef.clone()));
        Ok(v)
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

/// Minimizes the pinball loss over the rows of `window` (optionally
/// restricted by `mask`, indexed by dataset row).
pub fn fit_quantile(
    data: &Dataset,
    window: Range<usize>,
    alpha: f64,
    mask: Option<&[bool]>,
) -> Result<QuantileFit> {
    check_level("alpha", alpha)?;
    check_window(data, &window)?;
    let rows: Vec<usize> = match mask {
        Some(mask) => {
            if mask.len() != data.n() {
                return Err(Error::DimensionMismatch(format!(
                    "mask has {} entries for {} rows",
                    mask.len(),
                    data.n()
                )));
            }
            window.clone().filter(|&t| mask[t]).collect()
        }
        None => window.clone().collect(),
    };
    if rows.len() < data.p() + 1 {
        return Err(Error::WindowTooShort {
            len: rows.len(),
            min: data.p() + 1,
        });
    }
    let v = WarmFitter::new(data, data.y(), alpha).fit(&rows)?;
    Ok(QuantileFit::from_vertex(
        v,
        (window.start, window.end),
        alpha,
    ))
}

/// Fit over an arbitrary sorted row subset of `response`, without the
/// minimum-window rule (only `p` rows and a full-rank design are needed).
pub fn fit_subset(
    data: &Dataset,
    response: &[f64],
    rows: &[usize],
    alpha: f64,
) -> Result<QuantileFit> {
    check_level("alpha", alpha)?;
    if response.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "response has {} entries for {} rows",
            response.len(),
            data.n()
        )));
    }
    if rows.windows(2).any(|w| w[0] >= w[1]) || rows.last().is_some_and(|&t| t >= data.n()) {
        return Err(Error::InvalidParameter(
            "rows must be sorted, unique and in range".into(),
        ));
    }
    let v = WarmFitter::new(data, response, alpha).fit(rows)?;
    let window = (
        rows.first().copied().unwrap_or(0),
        rows.last().map_or(0, |t| t + 1),
    );
    Ok(QuantileFit::from_vertex(v, window, alpha))
}

fn check_trim(data: &Dataset, epsilon: f64) -> Result<usize> {
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

/// `alpha_hat(0, j/n)` for `j = floor(n eps) ..= n`; entry `i` fits rows
/// `0 .. floor(n eps) + i`.
pub fn forward_estimates(data: &Dataset, alpha: f64, epsilon: f64) -> Result<Vec<QuantileFit>> {
    check_level("alpha", alpha)?;
    let lo = check_trim(data, epsilon)?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let mut fitter = WarmFitter::new(data, data.y(), alpha);
    (lo..=n)
        .map(|j| {
            fitter
                .fit(&all[..j])
                .map(|v| QuantileFit::from_vertex(v, (0, j), alpha))
                .map_err(|e| e.at_index(j))
        })
        .collect()
}

/// `alpha_hat(j/n, 1)` for `j = 0 ..= n - floor(n eps)`; entry `j` fits rows
/// `j .. n`.
pub fn backward_estimates(data: &Dataset, alpha: f64, epsilon: f64) -> Result<Vec<QuantileFit>> {
    check_level("alpha", alpha)?;
    let lo = check_trim(data, epsilon)?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let mut fitter = WarmFitter::new(data, data.y(), alpha);
    // Smallest window first so every step only adds a row.
    let mut fits: Vec<QuantileFit> = (0..=n - lo)
        .rev()
        .map(|j| {
            fitter
                .fit(&all[j..])
                .map(|v| QuantileFit::from_vertex(v, (j, n), alpha))
                .map_err(|e| e.at_index(j))
        })
        .collect::<Result<_>>()?;
    fits.reverse();
    Ok(fits)
}

/// Fits on every window `t .. t + window_len`.
pub fn rolling_estimates(
    data: &Dataset,
    alpha: f64,
    window_len: usize,
) -> Result<Vec<QuantileFit>> {
    check_level("alpha", alpha)?;
    let n = data.n();
    let min = min_window_len(data.k());
    if window_len < min {
        return Err(Error::WindowTooShort {
            len: window_len,
            min,
        });
    }
    if window_len > n {
        return Err(Error::InvalidParameter(format!(
            "window of {window_len} rows exceeds sample of {n}"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut fitter = WarmFitter::new(data, data.y(), alpha);
    (0..=n - window_len)
        .map(|t| {
            fitter
                .fit(&all[t..t + window_len])
                .map(|v| QuantileFit::from_vertex(v, (t, t + window_len), alpha))
                .map_err(|e| e.at_index(t))
        })
        .collect()
}
