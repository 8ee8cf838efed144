//! Self-normalized break and significance statistics.
//!
//! The break statistic compares forward fits on `[0, s)` with backward fits
//! on `[s, 1)` and scales the contrast by a normalizer assembled from the
//! same recursive estimates, so no long-run variance is estimated.

use serde::{Deserialize, Serialize};

use crate::covar::{covar_paths, CovarPaths};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::limit_sim::{CriticalValueTable, LimitKind};
use crate::linalg;
use crate::regression::{
    backward_estimates, check_level, forward_estimates, min_window_len, trim_index, QuantileFit,
};

const MAX_CONDITION: f64 = 1e12;
const NORMALIZER_FLOOR: f64 = 1e-14;

/// Break-location grid `J = {floor(n eps), ..., floor(n (1 - eps))}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub epsilon: f64,
    pub lo: usize,
    pub hi: usize,
}

impl GridSpec {
    pub fn new(n: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        let lo = trim_index(n, epsilon);
        let hi = (n as f64 * (1.0 - epsilon) + 1e-9).floor() as usize;
        if lo == 0 || lo > hi {
            return Err(Error::EmptyGrid);
        }
        Ok(GridSpec { n, epsilon, lo, hi })
    }

    /// Grid for `data`, also requiring the shortest window to be fittable.
    pub fn for_data(data: &Dataset, epsilon: f64) -> Result<Self> {
        let g = GridSpec::new(data.n(), epsilon)?;
        let min = min_window_len(data.k());
        if g.lo < min {
            return Err(Error::WindowTooShort { len: g.lo, min });
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        (self.hi + 1).saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    pub fn s_values(&self) -> Vec<f64> {
        self.indices().map(|j| self.s(j)).collect()
    }

    fn s(&self, j: usize) -> f64 {
        j as f64 / self.n as f64
    }
}

/// Coefficient vectors indexed by window boundary; `None` marks a failed fit.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefPath {
    pub first: usize,
    pub coefs: Vec<Option<Vec<f64>>>,
}

impl CoefPath {
    pub fn new(first: usize, coefs: Vec<Option<Vec<f64>>>) -> Self {
        CoefPath { first, coefs }
    }

    pub fn from_fits(first: usize, fits: &[QuantileFit]) -> Self {
        CoefPath::new(first, fits.iter().map(|f| Some(f.coef.clone())).collect())
    }

    pub fn get(&self, j: usize) -> Option<&[f64]> {
        j.checked_sub(self.first)
            .and_then(|i| self.coefs.get(i))
            .and_then(|c| c.as_deref())
    }

    fn covers(&self, lo: usize, hi: usize) -> bool {
        lo >= self.first && hi < self.first + self.coefs.len()
    }

    fn dim(&self) -> Result<Option<usize>> {
        let mut dim = None;
        for c in self.coefs.iter().flatten() {
            match dim {
                None => dim = Some(c.len()),
                Some(d) if d != c.len() => {
                    return Err(Error::DimensionMismatch(format!(
                        "coefficient path mixes dimensions {d} and {}",
                        c.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(dim)
    }

    /// Selects coefficients `range` of every vector.
    pub fn project(&self, range: std::ops::Range<usize>) -> Self {
        CoefPath::new(
            self.first,
            self.coefs
                .iter()
                .map(|c| c.as_ref().map(|v| v[range.clone()].to_vec()))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub s: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub reject: bool,
    pub level: f64,
    pub critical_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakTestResult {
    pub statistic: f64,
    pub argmax_s: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub dim: usize,
    pub epsilon: f64,
    /// Grid indices whose normalizer was unusable.
    pub skipped: Vec<usize>,
    pub decision: Option<Decision>,
    pub p_value: Option<f64>,
}

fn check_table(table: &CriticalValueTable, kind: LimitKind, dim: usize) -> Result<()> {
    if table.kind != kind {
        return Err(Error::InvalidParameter(format!(
            "table describes the {:?} law, expected {kind:?}",
            table.kind
        )));
    }
    if kind == LimitKind::Break && table.dim != dim {
        return Err(Error::DimensionMismatch(format!(
            "statistic has dimension {dim}, table has {}",
            table.dim
        )));
    }
    Ok(())
}

fn table_quantile(table: &CriticalValueTable, level: f64) -> Result<f64> {
    check_level("level", level)?;
    table.critical_value(level).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "table has no {} quantile and no raw sample",
            1.0 - level
        ))
    })
}

impl BreakTestResult {
    /// Attaches a decision at `level` and, when the table keeps its raw
    /// sample, a p-value.
    pub fn decide(&mut self, table: &CriticalValueTable, level: f64) -> Result<()> {
        check_table(table, LimitKind::Break, self.dim)?;
        let cv = table_quantile(table, level)?;
        self.decision = Some(Decision {
            reject: self.statistic > cv,
            level,
            critical_value: cv,
        });
        self.p_value = table.p_value(self.statistic);
        Ok(())
    }

    pub fn rejects(&self) -> Option<bool> {
        self.decision.map(|d| d.reject)
    }
}

/// Packed lower triangle of a symmetric `d x d` matrix, one per grid point.
struct TriangleSeq {
    d: usize,
    data: Vec<f64>,
}

impl TriangleSeq {
    fn tri(d: usize) -> usize {
        d * (d + 1) / 2
    }

    fn at(&self, i: usize) -> &[f64] {
        let t = Self::tri(self.d);
        &self.data[i * t..(i + 1) * t]
    }
}

/// `sum_i w_i (c_i - c_j)(c_i - c_j)'` for every `j` with a grid slot, where `i`
/// runs from the start of `order` up to and including `j`.
///
/// The sum is expanded into running moments of `c_i - centre`, which leaves
/// the differences untouched and keeps the moments of the same order as the
/// differences themselves.
fn running_outer_sums(
    path: &CoefPath,
    order: impl Iterator<Item = usize>,
    weight: impl Fn(usize) -> f64,
    centre: &[f64],
    n_grid: usize,
    slot: impl Fn(usize) -> Option<usize>,
) -> TriangleSeq {
    let d = centre.len();
    let t = TriangleSeq::tri(d);
    let mut out = TriangleSeq {
        d,
        data: vec![0.0; n_grid * t],
    };
    let mut m2 = vec![0.0; t];
    let mut m1 = vec![0.0; d];
    let mut m0 = 0.0;
    let mut c = vec![0.0; d];
    for i in order {
        let Some(f) = path.get(i) else {
            continue;
        };
        for a in 0..d {
            c[a] = f[a] - centre[a];
        }
        let w = weight(i);
        let mut idx = 0;
        for a in 0..d {
            m1[a] += w * c[a];
            for b in 0..=a {
                m2[idx] += w * c[a] * c[b];
                idx += 1;
            }
        }
        m0 += w;
        if let Some(g) = slot(i) {
            let dst = &mut out.data[g * t..(g + 1) * t];
            let mut idx = 0;
            for a in 0..d {
                for b in 0..=a {
                    dst[idx] = m2[idx] - m1[a] * c[b] - c[a] * m1[b] + m0 * c[a] * c[b];
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Self-normalized break statistic from forward fits `fwd[j]` on `[0, j)`
/// and backward fits `bwd[j]` on `[j, n)`.
pub fn sn_break_statistic(
    fwd: &CoefPath,
    bwd: &CoefPath,
    grid: &GridSpec,
) -> Result<BreakTestResult> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !fwd.covers(grid.lo, grid.hi) || !bwd.covers(grid.lo, grid.hi) {
        return Err(Error::DimensionMismatch(format!(
            "estimate paths do not cover the grid {}..={}",
            grid.lo, grid.hi
        )));
    }
    let d = match (fwd.dim()?, bwd.dim()?) {
        (Some(a), Some(b)) if a == b => a,
        (Some(a), Some(b)) => {
            return Err(Error::DimensionMismatch(format!(
                "forward dimension {a}, backward dimension {b}"
            )))
        }
        _ => {
            return Err(Error::TooManySkippedPoints {
                skipped: grid.len(),
                total: grid.len(),
            })
        }
    };
    let nf = grid.n as f64;
    let (lo, hi) = (grid.lo, grid.hi);
    let slot = |i: usize| (lo..=hi).contains(&i).then(|| i - lo);
    let centre = |p: &CoefPath| -> Vec<f64> {
        let mut acc = vec![0.0; d];
        let mut cnt = 0.0_f64;
        for j in grid.indices() {
            if let Some(f) = p.get(j) {
                acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                cnt += 1.0;
            }
        }
        acc.iter().map(|a| a / cnt.max(1.0)).collect()
    };
    let fwd_sums = running_outer_sums(
        fwd,
        lo..=hi,
        |i| (i as f64 / nf).powi(2),
        &centre(fwd),
        grid.len(),
        slot,
    );
    let bwd_sums = running_outer_sums(
        bwd,
        (lo..=hi).rev(),
        |i| (1.0 - i as f64 / nf).powi(2),
        &centre(bwd),
        grid.len(),
        slot,
    );

    let mut mat = vec![0.0; d * d];
    let mut delta = vec![0.0; d];
    let mut work = vec![0.0; d];
    let mut trajectory = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for j in grid.indices() {
        let (Some(f), Some(b)) = (fwd.get(j), bwd.get(j)) else {
            skipped.push(j);
            continue;
        };
        let g = j - lo;
        let (nf_j, nb_j) = (fwd_sums.at(g), bwd_sums.at(g));
        let mut idx = 0;
        for a in 0..d {
            for c in 0..=a {
                mat[a * d + c] = (nf_j[idx] + nb_j[idx]) / nf;
                idx += 1;
            }
            delta[a] = f[a] - b[a];
        }
        if !linalg::cholesky_in_place(&mut mat, d)
            || linalg::chol_condition_estimate(&mat, d) >= MAX_CONDITION
        {
            skipped.push(j);
            continue;
        }
        let s = grid.s(j);
        let value = (s * (1.0 - s)).powi(2) * linalg::chol_quad_form(&mat, d, &delta, &mut work);
        trajectory.push(TrajectoryPoint { s, value });
        if best.is_none_or(|(v, _)| value > v) {
            best = Some((value, s));
        }
    }
    if skipped.len() * 10 > grid.len() {
        return Err(Error::TooManySkippedPoints {
            skipped: skipped.len(),
            total: grid.len(),
        });
    }
    let (statistic, argmax_s) = best.ok_or(Error::EmptyGrid)?;
    Ok(BreakTestResult {
        statistic,
        argmax_s,
        trajectory,
        dim: d,
        epsilon: grid.epsilon,
        skipped,
        decision: None,
        p_value: None,
    })
}

/// Forward and backward quantile-regression coefficient paths.
pub fn qr_paths(data: &Dataset, alpha: f64, grid: &GridSpec) -> Result<(CoefPath, CoefPath)> {
    let fwd = forward_estimates(data, alpha, grid.epsilon)?;
    let bwd = backward_estimates(data, alpha, grid.epsilon)?;
    Ok((
        CoefPath::from_fits(grid.lo, &fwd),
        CoefPath::from_fits(0, &bwd),
    ))
}

/// `U_{n,alpha}`: break test for the quantile-regression coefficients.
pub fn qr_break_test(data: &Dataset, alpha: f64, grid: &GridSpec) -> Result<BreakTestResult> {
    let (f, b) = qr_paths(data, alpha, grid)?;
    sn_break_statistic(&f, &b, grid)
}

/// Stacked `(alpha_hat', beta_hat')'` paths from precomputed CoVaR fits.
pub fn stacked_paths(paths: &CovarPaths) -> (CoefPath, CoefPath) {
    let stack = |v: &[(QuantileFit, Option<Vec<f64>>)]| -> Vec<Option<Vec<f64>>> {
        v.iter()
            .map(|(q, c)| {
                c.as_ref()
                    .map(|c| q.coef.iter().chain(c).copied().collect())
            })
            .collect()
    };
    (
        CoefPath::new(paths.lo, stack(&paths.forward)),
        CoefPath::new(0, stack(&paths.backward)),
    )
}

/// Step-one paths from precomputed CoVaR fits.
pub fn quantile_step_paths(paths: &CovarPaths) -> (CoefPath, CoefPath) {
    step_paths(paths, false)
}

/// Step-two paths from precomputed CoVaR fits.
pub fn covar_step_paths(paths: &CovarPaths) -> (CoefPath, CoefPath) {
    step_paths(paths, true)
}

fn step_paths(paths: &CovarPaths, second: bool) -> (CoefPath, CoefPath) {
    let pick = |v: &[(QuantileFit, Option<Vec<f64>>)]| -> Vec<Option<Vec<f64>>> {
        v.iter()
            .map(|(q, c)| {
                if second {
                    c.clone()
                } else {
                    Some(q.coef.clone())
                }
            })
            .collect()
    };
    (
        CoefPath::new(paths.lo, pick(&paths.forward)),
        CoefPath::new(0, pick(&paths.backward)),
    )
}

/// `U_{n,gamma}`: joint break test for the quantile and CoVaR coefficients.
pub fn covar_break_test(
    data: &Dataset,
    alpha: f64,
    beta: f64,
    grid: &GridSpec,
) -> Result<BreakTestResult> {
    let paths = covar_paths(data, alpha, beta, grid.epsilon)?;
    let (f, b) = stacked_paths(&paths);
    sn_break_statistic(&f, &b, grid)
}

/// `U_{n,beta}`: break test for the CoVaR coefficients alone.
pub fn covar_coef_break_test(
    data: &Dataset,
    alpha: f64,
    beta: f64,
    grid: &GridSpec,
) -> Result<BreakTestResult> {
    let paths = covar_paths(data, alpha, beta, grid.epsilon)?;
    let (f, b) = step_paths(&paths, true);
    sn_break_statistic(&f, &b, grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageOutcome {
    /// Stage one rejected; the CoVaR stage was not run.
    QuantileUnstable,
    /// Stage one retained, stage two rejected.
    CovarUnstable,
    NoBreak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub level: f64,
    pub stage_level: f64,
    pub stage_one: BreakTestResult,
    pub stage_two: Option<BreakTestResult>,
    pub outcome: TwoStageOutcome,
}

impl TwoStageResult {
    pub fn rejects(&self) -> bool {
        self.outcome != TwoStageOutcome::NoBreak
    }
}

/// Bonferroni two-stage test: `U_{n,alpha}` at `level / 2`, then, only if
/// that retains, `U_{n,beta}` at `level / 2`. Both tables are for dimension
/// `k + 1`.
pub fn two_stage_covar_test(
    data: &Dataset,
    alpha: f64,
    beta: f64,
    grid: &GridSpec,
    level: f64,
    table_qr: &CriticalValueTable,
    table_covar: &CriticalValueTable,
) -> Result<TwoStageResult> {
    check_level("level", level)?;
    let p = data.p();
    check_table(table_qr, LimitKind::Break, p)?;
    check_table(table_covar, LimitKind::Break, p)?;
    let paths = covar_paths(data, alpha, beta, grid.epsilon)?;
    two_stage_from_paths(&paths, grid, level, table_qr, table_covar)
}

/// Two-stage test from precomputed CoVaR paths.
pub fn two_stage_from_paths(
    paths: &CovarPaths,
    grid: &GridSpec,
    level: f64,
    table_qr: &CriticalValueTable,
    table_covar: &CriticalValueTable,
) -> Result<TwoStageResult> {
    let stage_level = level / 2.0;
    let (f, b) = step_paths(paths, false);
    let mut stage_one = sn_break_statistic(&f, &b, grid)?;
    stage_one.decide(table_qr, stage_level)?;
    if stage_one.rejects() == Some(true) {
        return Ok(TwoStageResult {
            level,
            stage_level,
            stage_one,
            stage_two: None,
            outcome: TwoStageOutcome::QuantileUnstable,
        });
    }
    let (f, b) = step_paths(paths, true);
    let mut stage_two = sn_break_statistic(&f, &b, grid)?;
    stage_two.decide(table_covar, stage_level)?;
    let outcome = if stage_two.rejects() == Some(true) {
        TwoStageOutcome::CovarUnstable
    } else {
        TwoStageOutcome::NoBreak
    };
    Ok(TwoStageResult {
        level,
        stage_level,
        stage_one,
        stage_two: Some(stage_two),
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub coef_index: usize,
    pub estimate: f64,
    pub normalizer: f64,
    pub statistic: f64,
    pub p_value: Option<f64>,
}

/// Self-normalized significance statistic `T_n = a_n^2 / S_n` for
/// coefficient `index`, with
/// `S_n = (1/n) sum_{j >= floor(n eps)} (j/n)^2 (a_j - a_n)^2`.
pub fn sn_significance(
    fwd: &CoefPath,
    index: usize,
    grid: &GridSpec,
    table: Option<&CriticalValueTable>,
) -> Result<SignificanceResult> {
    let n = grid.n;
    if !fwd.covers(grid.lo, n) {
        return Err(Error::DimensionMismatch(format!(
            "forward path does not cover {}..={n}",
            grid.lo
        )));
    }
    let last = fwd.get(n).ok_or(Error::EmptyGrid)?;
    if index >= last.len() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient index {index} out of range for dimension {}",
            last.len()
        )));
    }
    if let Some(t) = table {
        check_table(t, LimitKind::Significance, 1)?;
    }
    let nf = n as f64;
    let a_n = last[index];
    let s: f64 = (grid.lo..=n)
        .filter_map(|j| fwd.get(j).map(|f| (j, f[index])))
        .map(|(j, a)| (j as f64 / nf).powi(2) * (a - a_n).powi(2))
        .sum::<f64>()
        / nf;
    if s < NORMALIZER_FLOOR {
        return Err(Error::ZeroNormalizer { value: s });
    }
    let statistic = a_n * a_n / s;
    Ok(SignificanceResult {
        coef_index: index,
        estimate: a_n,
        normalizer: s,
        statistic,
        p_value: table.and_then(|t| t.p_value(statistic)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_bounds() {
        let g = GridSpec::new(100, 0.1).unwrap();
        assert_eq!((g.lo, g.hi, g.len()), (10, 90, 81));
        assert!((g.s_values()[0] - 0.1).abs() < 1e-15);
        assert!(GridSpec::new(100, 0.5).is_err());
        assert!(GridSpec::new(100, 0.0).is_err());
        assert!(matches!(GridSpec::new(5, 0.1), Err(Error::EmptyGrid)));
    }

    #[test]
    fn constant_paths_skip_everything() {
        let g = GridSpec::new(100, 0.1).unwrap();
        let f = CoefPath::new(10, vec![Some(vec![1.5]); 91]);
        let b = CoefPath::new(0, vec![Some(vec![1.5]); 91]);
        assert!(matches!(
            sn_break_statistic(&f, &b, &g),
            Err(Error::TooManySkippedPoints {
                skipped: 81,
                total: 81
            })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let g = GridSpec::new(100, 0.1).unwrap();
        let f = CoefPath::new(10, vec![Some(vec![1.0, 2.0]); 91]);
        let b = CoefPath::new(0, vec![Some(vec![1.0]); 91]);
        assert!(matches!(
            sn_break_statistic(&f, &b, &g),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn constant_significance_path_is_degenerate() {
        let g = GridSpec::new(100, 0.1).unwrap();
        let f = CoefPath::new(10, vec![Some(vec![0.3]); 91]);
        assert!(matches!(
            sn_significance(&f, 0, &g, None),
            Err(Error::ZeroNormalizer { .. })
        ));
    }
}
