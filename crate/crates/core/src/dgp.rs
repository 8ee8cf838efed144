//! Simulation design for predictive quantile and CoVaR regressions with
//! persistent, endogenous predictors, and size/power experiments on it.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::covar::covar_paths;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::limit_sim::{replication_rng, CriticalValueTable, LimitKind};
use crate::linalg;
use crate::regression::check_level;
use crate::sn::{
    qr_paths, quantile_step_paths, sn_break_statistic, sn_significance, stacked_paths,
    two_stage_from_paths, BreakTestResult, GridSpec,
};

const BURN_IN: usize = 100;

/// Persistence of the predictors: `R_n = r_n I` with `r_n = 1 - c` (I0) or
/// `r_n = 1 - n^{-kappa}` (NS).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regime {
    I0 { c: f64 },
    Ns { kappa: f64 },
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::I0 { .. } => "i0",
            Regime::Ns { .. } => "ns",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Regime::I0 { c } => c,
            Regime::Ns { kappa } => kappa,
        }
    }

    pub fn autoregressive(&self, n: usize) -> f64 {
        match *self {
            Regime::I0 { c } => 1.0 - c,
            Regime::Ns { kappa } => 1.0 - (n as f64).powf(-kappa),
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.param();
        if p > 0.0 && p < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "{} regime parameter must lie in (0, 1), got {p}",
                self.name()
            )))
        }
    }
}

/// Shift of `delta` in every quantile and CoVaR coefficient from row
/// `floor(n s_star)` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakSpec {
    pub s_star: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub regime: Regime,
    /// Predictor means; empty means zero.
    #[serde(default)]
    pub mu_x: Vec<f64>,
    pub phi: f64,
    pub rho_v: f64,
    pub rho_eps: f64,
    pub rho_veps: f64,
    #[serde(default)]
    pub break_spec: Option<BreakSpec>,
    /// Common quantile and CoVaR coefficients; empty means `(0, 1, ..., 1)`.
    #[serde(default)]
    pub base_coef: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl DgpConfig {
    /// The reference simulation design with two predictors and
    /// `alpha = beta = 0.9`.
    ///
    /// The cross correlation is `-0.45`: with two predictors `-0.95` makes
    /// the joint innovation covariance indefinite.
    pub fn reference(n: usize, regime: Regime, seed: u64) -> Self {
        DgpConfig {
            n,
            k: 2,
            alpha: 0.9,
            beta: 0.9,
            regime,
            mu_x: Vec::new(),
            phi: -0.95,
            rho_v: 0.0,
            rho_eps: 0.0,
            rho_veps: -0.45,
            break_spec: None,
            base_coef: Vec::new(),
            seed,
        }
    }

    pub fn coef(&self) -> Vec<f64> {
        if self.base_coef.is_empty() {
            (0..=self.k)
                .map(|i| if i == 0 { 0.0 } else { 1.0 })
                .collect()
        } else {
            self.base_coef.clone()
        }
    }

    fn mu(&self) -> Vec<f64> {
        if self.mu_x.is_empty() {
            vec![0.0; self.k]
        } else {
            self.mu_x.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_level("alpha", self.alpha)?;
        check_level("beta", self.beta)?;
        self.regime.validate()?;
        if self.n < 2 {
            return Err(Error::InvalidParameter(
                "need at least two observations".into(),
            ));
        }
        if !self.base_coef.is_empty() && self.base_coef.len() != self.k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "base_coef has {} entries, expected {}",
                self.base_coef.len(),
                self.k + 1
            )));
        }
        if !self.mu_x.is_empty() && self.mu_x.len() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "mu_x has {} entries, expected {}",
                self.mu_x.len(),
                self.k
            )));
        }
        if self.rho_v.is_nan() || self.rho_v.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "rho_v must lie in (-1, 1), got {}",
                self.rho_v
            )));
        }
        if let Some(b) = self.break_spec {
            if !(b.s_star > 0.0 && b.s_star < 1.0) || !b.delta.is_finite() {
                return Err(Error::InvalidParameter(format!("bad break {b:?}")));
            }
        }
        Ok(())
    }
}

/// `Psi` for `(v_1, v_2, eps_1, ..., eps_k)`: unit diagonal, equicorrelated
/// blocks and constant cross correlation.
pub fn psi_matrix(k: usize, rho_v: f64, rho_eps: f64, rho_veps: f64) -> Vec<f64> {
    let m = k + 2;
    let mut psi = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            psi[i * m + j] = if i == j {
                1.0
            } else if i < 2 && j < 2 {
                rho_v
            } else if i >= 2 && j >= 2 {
                rho_eps
            } else {
                rho_veps
            };
        }
    }
    psi
}

fn psi_cholesky(cfg: &DgpConfig) -> Result<Vec<f64>> {
    let m = cfg.k + 2;
    let mut l = psi_matrix(cfg.k, cfg.rho_v, cfg.rho_eps, cfg.rho_veps);
    if !linalg::cholesky_in_place(&mut l, m) {
        return Err(Error::NotPositiveDefinite(format!(
            "innovation covariance with rho_v={}, rho_eps={}, rho_veps={}, k={}",
            cfg.rho_v, cfg.rho_eps, cfg.rho_veps, cfg.k
        )));
    }
    for i in 0..m {
        for j in i + 1..m {
            l[i * m + j] = 0.0;
        }
    }
    Ok(l)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `(q_alpha, covar_q)` with `q_alpha = Phi^{-1}(alpha)` and
/// `P(v_2 <= covar_q | v_1 >= q_alpha) = beta` for a standard bivariate
/// normal with correlation `rho_v`.
pub fn covar_error_offset(alpha: f64, beta: f64, rho_v: f64) -> Result<(f64, f64)> {
    check_level("alpha", alpha)?;
    check_level("beta", beta)?;
    if rho_v.is_nan() || rho_v.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "rho_v must lie in (-1, 1), got {rho_v}"
        )));
    }
    let std = Normal::standard();
    let a = std.inverse_cdf(alpha);
    let tail = 1.0 - alpha;
    let sd = (1.0 - rho_v * rho_v).sqrt();
    let upper = a.max(0.0) + 12.0;
    let joint = |q: f64| -> f64 {
        let f = |x: f64| std.pdf(x) * std.cdf((q - rho_v * x) / sd);
        adaptive_simpson(&f, a, upper, 1e-14)
    };
    let target = beta * tail;
    let (mut lo, mut hi) = (-15.0_f64, 15.0_f64);
    if joint(lo) > target || joint(hi) < target {
        return Err(Error::RootNotBracketed { lo, hi });
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if joint(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((a, 0.5 * (lo + hi)))
}

/// Prepared generator: validated configuration plus the derived constants.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: DgpConfig,
    chol: Vec<f64>,
    q_alpha: f64,
    covar_q: f64,
}

impl Generator {
    pub fn new(cfg: &DgpConfig) -> Result<Self> {
        cfg.validate()?;
        let chol = psi_cholesky(cfg)?;
        let (q_alpha, covar_q) = covar_error_offset(cfg.alpha, cfg.beta, cfg.rho_v)?;
        Ok(Generator {
            cfg: cfg.clone(),
            chol,
            q_alpha,
            covar_q,
        })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.cfg
    }

    pub fn offsets(&self) -> (f64, f64) {
        (self.q_alpha, self.covar_q)
    }

    /// Data for replication `rep`, drawn from stream `rep` of the seed.
    pub fn replication(&self, rep: u64) -> Dataset {
        let cfg = &self.cfg;
        let (n, k) = (cfg.n, cfg.k);
        let m = k + 2;
        let mut rng = replication_rng(cfg.seed, rep);
        let mut z = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut draw = |w: &mut [f64]| {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            linalg::mat_vec(&self.chol, m, m, &z, w);
        };

        let mut u = vec![0.0; k];
        for _ in 0..BURN_IN {
            draw(&mut w);
            for i in 0..k {
                u[i] = cfg.phi * u[i] + w[2 + i];
            }
        }

        let r = cfg.regime.autoregressive(n);
        let mu = cfg.mu();
        let coef = cfg.coef();
        let brk = cfg
            .break_spec
            .map(|b| ((n as f64 * b.s_star + 1e-9).floor() as usize, b.delta));
        let mut xi = vec![0.0; k];
        let mut preds = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for t in 0..n {
            // Row t pairs the responses at t + 1 with the predictors at t.
            let x: Vec<f64> = (0..k).map(|i| mu[i] + xi[i]).collect();
            draw(&mut w);
            let shift = match brk {
                Some((at, delta)) if t >= at => delta,
                _ => 0.0,
            };
            let fit = coef[0] + shift + (0..k).map(|i| (coef[i + 1] + shift) * x[i]).sum::<f64>();
            y.push(fit + w[0] - self.q_alpha);
            zs.push(fit + w[1] - self.covar_q);
            for i in 0..k {
                u[i] = cfg.phi * u[i] + w[2 + i];
                xi[i] = r * xi[i] + u[i];
            }
            preds.push(x);
        }
        Dataset::new(y, Some(zs), &preds).expect("simulated data are finite")
    }
}

/// Data for replication 0 of the configured seed.
pub fn generate(cfg: &DgpConfig) -> Result<Dataset> {
    Ok(Generator::new(cfg)?.replication(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    /// Break test for the quantile-regression coefficients.
    Qr,
    /// Joint break test for quantile and CoVaR coefficients.
    Covar,
    /// Bonferroni two-stage test.
    TwoStage,
    /// Self-normalized significance test of the first slope.
    Significance,
}

impl TestKind {
    pub fn name(&self) -> &'static str {
        match self {
            TestKind::Qr => "qr",
            TestKind::Covar => "covar",
            TestKind::TwoStage => "two-stage",
            TestKind::Significance => "significance",
        }
    }

    /// Dimension of the limit table the test consumes; `None` for the
    /// scalar significance law.
    pub fn table_dim(&self, k: usize) -> Option<usize> {
        match self {
            TestKind::Qr | TestKind::TwoStage => Some(k + 1),
            TestKind::Covar => Some(2 * k + 2),
            TestKind::Significance => None,
        }
    }
}

/// Critical-value tables by dimension, plus the scalar significance table.
#[derive(Clone, Debug, Default)]
pub struct TableSet {
    pub by_dim: BTreeMap<usize, CriticalValueTable>,
    pub scalar: Option<CriticalValueTable>,
}

impl TableSet {
    pub fn insert(&mut self, table: CriticalValueTable) {
        match table.kind {
            LimitKind::Break => {
                self.by_dim.insert(table.dim, table);
            }
            LimitKind::Significance => self.scalar = Some(table),
        }
    }

    pub fn for_test(&self, test: TestKind, k: usize) -> Result<&CriticalValueTable> {
        let found = match test.table_dim(k) {
            Some(d) => self.by_dim.get(&d),
            None => self.scalar.as_ref(),
        };
        found.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no critical-value table for the {} test with k = {k}",
                test.name()
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub replications: usize,
    pub level: f64,
    pub epsilon: f64,
    pub tests: Vec<TestKind>,
    #[serde(default)]
    pub threads: Option<usize>,
}

/// One row of experiment output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub regime: String,
    pub param: f64,
    pub n: usize,
    pub delta: f64,
    pub s_star: Option<f64>,
    pub test: String,
    pub level: f64,
    pub reps: usize,
    pub rejections: usize,
    /// Rejections over replications that produced a decision.
    pub rate: Option<f64>,
    pub se: Option<f64>,
    pub failures: usize,
}

/// Decision of every requested test on one replication; `None` on failure.
fn replicate(
    gen: &Generator,
    rep: u64,
    spec: &ExperimentSpec,
    tables: &TableSet,
) -> Vec<Option<bool>> {
    let data = gen.replication(rep);
    let k = gen.cfg.k;
    let Ok(grid) = GridSpec::for_data(&data, spec.epsilon) else {
        return vec![None; spec.tests.len()];
    };
    let needs_covar = spec
        .tests
        .iter()
        .any(|t| matches!(t, TestKind::Covar | TestKind::TwoStage));
    let (qr_fwd, qr_bwd, covar) = if needs_covar {
        match covar_paths(&data, gen.cfg.alpha, gen.cfg.beta, spec.epsilon) {
            Ok(p) => {
                let (f, b) = quantile_step_paths(&p);
                (Some(f), Some(b), Some(p))
            }
            Err(_) => (None, None, None),
        }
    } else {
        match qr_paths(&data, gen.cfg.alpha, &grid) {
            Ok((f, b)) => (Some(f), Some(b), None),
            Err(_) => (None, None, None),
        }
    };
    let decide = |res: Result<BreakTestResult>, table: &CriticalValueTable| {
        let mut r = res.ok()?;
        r.decide(table, spec.level).ok()?;
        r.rejects()
    };
    spec.tests
        .iter()
        .map(|&test| {
            let table = tables.for_test(test, k).ok()?;
            match test {
                TestKind::Qr => decide(
                    sn_break_statistic(qr_fwd.as_ref()?, qr_bwd.as_ref()?, &grid),
                    table,
                ),
                TestKind::Covar => {
                    let (f, b) = stacked_paths(covar.as_ref()?);
                    decide(sn_break_statistic(&f, &b, &grid), table)
                }
                TestKind::TwoStage => {
                    two_stage_from_paths(covar.as_ref()?, &grid, spec.level, table, table)
                        .ok()
                        .map(|r| r.rejects())
                }
                TestKind::Significance => {
                    let idx = 1.min(k);
                    let r = sn_significance(qr_fwd.as_ref()?, idx, &grid, Some(table)).ok()?;
                    r.p_value.map(|p| p < spec.level)
                }
            }
        })
        .collect()
}

/// Runs `spec.replications` replications of one design.
pub fn run_cell(
    cfg: &DgpConfig,
    spec: &ExperimentSpec,
    tables: &TableSet,
) -> Result<Vec<CellRecord>> {
    check_level("level", spec.level)?;
    if spec.replications == 0 {
        return Err(Error::InvalidParameter(
            "need at least one replication".into(),
        ));
    }
    for &t in &spec.tests {
        tables.for_test(t, cfg.k)?;
    }
    let gen = Generator::new(cfg)?;
    let job = || -> Vec<Vec<Option<bool>>> {
        (0..spec.replications as u64)
            .into_par_iter()
            .map(|rep| replicate(&gen, rep, spec, tables))
            .collect()
    };
    let outcomes = match spec.threads {
        None => job(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(job),
    };
    let (delta, s_star) = cfg
        .break_spec
        .map_or((0.0, None), |b| (b.delta, Some(b.s_star)));
    Ok(spec
        .tests
        .iter()
        .enumerate()
        .map(|(i, test)| {
            let rejections = outcomes.iter().filter(|o| o[i] == Some(true)).count();
            let failures = outcomes.iter().filter(|o| o[i].is_none()).count();
            let ok = spec.replications - failures;
            let rate = (ok > 0).then(|| rejections as f64 / ok as f64);
            CellRecord {
                regime: cfg.regime.name().to_string(),
                param: cfg.regime.param(),
                n: cfg.n,
                delta,
                s_star,
                test: test.name().to_string(),
                level: spec.level,
                reps: spec.replications,
                rejections,
                rate,
                se: rate.map(|r| (r * (1.0 - r) / ok as f64).sqrt()),
                failures,
            }
        })
        .collect())
}

/// Rejection rates under the null for every design.
pub fn run_size_experiment(
    cells: &[DgpConfig],
    spec: &ExperimentSpec,
    tables: &TableSet,
) -> Result<Vec<CellRecord>> {
    let mut out = Vec::new();
    for cfg in cells {
        let null = DgpConfig {
            break_spec: None,
            ..cfg.clone()
        };
        out.extend(run_cell(&null, spec, tables)?);
    }
    Ok(out)
}

/// Rejection rates for a break of each size in `deltas` at `s_star`.
///
/// Every cell reuses the same random streams, so differences across
/// `delta` are not blurred by sampling noise in the innovations.
pub fn run_power_experiment(
    base: &DgpConfig,
    deltas: &[f64],
    s_star: f64,
    spec: &ExperimentSpec,
    tables: &TableSet,
) -> Result<Vec<CellRecord>> {
    let mut out = Vec::new();
    for &delta in deltas {
        let cfg = DgpConfig {
            break_spec: Some(BreakSpec { s_star, delta }),
            ..base.clone()
        };
        out.extend(run_cell(&cfg, spec, tables)?);
    }
    Ok(out)
}

/// Sweep file: a base design and the axes to vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub version: u32,
    pub base: DgpConfig,
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub sweep: SweepAxes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    /// Sample sizes; empty keeps `base.n`.
    #[serde(default)]
    pub n: Vec<usize>,
    /// Regimes; empty keeps `base.regime`.
    #[serde(default)]
    pub regimes: Vec<Regime>,
    /// Break sizes; empty runs the null only.
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default = "default_s_star")]
    pub s_star: f64,
}

fn default_s_star() -> f64 {
    0.5
}

pub const SWEEP_VERSION: u32 = 1;

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidParameter(format!("sweep config: {e}")))?;
        if cfg.version != SWEEP_VERSION {
            return Err(Error::InvalidParameter(format!(
                "sweep config version {} unsupported (expected {SWEEP_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Every design in the sweep, regimes outermost, then sample sizes,
    /// then break sizes.
    pub fn cells(&self) -> Vec<DgpConfig> {
        let regimes = if self.sweep.regimes.is_empty() {
            vec![self.base.regime]
        } else {
            self.sweep.regimes.clone()
        };
        let ns = if self.sweep.n.is_empty() {
            vec![self.base.n]
        } else {
            self.sweep.n.clone()
        };
        let mut out = Vec::new();
        for regime in &regimes {
            for &n in &ns {
                let cell = DgpConfig {
                    n,
                    regime: *regime,
                    ..self.base.clone()
                };
                if self.sweep.delta.is_empty() {
                    out.push(cell);
                } else {
                    for &delta in &self.sweep.delta {
                        out.push(DgpConfig {
                            break_spec: Some(BreakSpec {
                                s_star: self.sweep.s_star,
                                delta,
                            }),
                            ..cell.clone()
                        });
                    }
                }
            }
        }
        out
    }

    /// Dimensions of the break-law tables the sweep needs.
    pub fn table_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self
            .experiment
            .tests
            .iter()
            .filter_map(|t| t.table_dim(self.base.k))
            .collect();
        dims.sort_unstable();
        dims.dedup();
        dims
    }

    pub fn run(&self, tables: &TableSet) -> Result<Vec<CellRecord>> {
        let mut out = Vec::new();
        for cell in self.cells() {
            out.extend(run_cell(&cell, &self.experiment, tables)?);
        }
        Ok(out)
    }
}
