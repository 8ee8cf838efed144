use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qbreak::dgp::{
    CellRecord, DgpConfig, ExperimentSpec, Regime, SweepAxes, SweepConfig, TableSet, TestKind,
    SWEEP_VERSION,
};
use qbreak::limit_sim::{
    simulate_limit_scalar, simulate_limit_u, store_table, write_atomic, CriticalValueTable,
    LimitKind, SimConfig, DEFAULT_GRID, DEFAULT_REPS,
};
use qbreak::regression::rolling_estimates;
use qbreak::sn::{
    covar_break_test, qr_break_test, qr_paths, sn_significance, two_stage_covar_test,
    BreakTestResult, GridSpec, TrajectoryPoint, TwoStageOutcome,
};

mod ingest;
mod tables;

use ingest::{check_rows, ingest, CsvSchema, IngestError};
use tables::Resolver;

/// Self-normalized structural-break tests for predictive quantile and CoVaR
/// regressions.
#[derive(Parser)]
#[command(name = "qbreak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a break test on a CSV file.
    Test(TestArgs),
    /// Simulate a critical-value table.
    Critvals(CritvalsArgs),
    /// Monte Carlo size and power experiments.
    Mc(McArgs),
    /// Self-normalized significance statistics for every coefficient.
    Significance(SignificanceArgs),
    /// Rolling-window quantile-regression estimates.
    Rolling(RollingArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    y_col: String,
    #[arg(long)]
    z_col: Option<String>,
    /// Comma-separated predictor columns.
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    /// Label column carried through to the output.
    #[arg(long)]
    date_col: Option<String>,
    /// Predictors are already aligned with the responses.
    #[arg(long, visible_alias = "lagged")]
    no_lag: bool,
}

impl DataArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            y_col: self.y_col.clone(),
            z_col: self.z_col.clone(),
            x_cols: self.x_cols.clone(),
            date_col: self.date_col.clone(),
            lag_predictors: !self.no_lag,
        }
    }
}

#[derive(Args)]
struct TableArgs {
    /// Critical-value table files (repeatable).
    #[arg(long)]
    critvals: Vec<PathBuf>,
    /// Directory of cached tables.
    #[arg(long, env = "QBREAK_CACHE")]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

impl TableArgs {
    fn resolver(&self) -> Resolver {
        Resolver::new(
            self.critvals.clone(),
            self.cache_dir.clone(),
            self.seed,
            self.threads,
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TestName {
    Qr,
    Covar,
    CovarTwoStage,
    /// CoVaR test with the roles of the two responses swapped.
    Exposure,
}

#[derive(Args)]
struct TestArgs {
    #[arg(value_enum)]
    test: TestName,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Exit with status 2 when the null is rejected.
    #[arg(long)]
    fail_on_reject: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LawName {
    Break,
    Significance,
}

#[derive(Args)]
struct CritvalsArgs {
    #[arg(long, value_enum, default_value = "break")]
    law: LawName,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Size,
    Power,
}

#[derive(Args)]
struct McArgs {
    /// Sweep description (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the sample sizes of a preset.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[command(flatten)]
    tables: TableArgs,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SignificanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RollingArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// JSON result of a single break test.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TestDocument {
    test: String,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    beta: Option<f64>,
    epsilon: f64,
    dim: usize,
    statistic: f64,
    argmax_s: f64,
    critical_values: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    reject: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    level: Option<f64>,
    trajectory: Vec<TrajectoryPoint>,
    skipped: Vec<usize>,
    warnings: Vec<String>,
}

impl TestDocument {
    fn new(
        test: &str,
        alpha: f64,
        beta: Option<f64>,
        res: &BreakTestResult,
        table: &CriticalValueTable,
    ) -> Self {
        TestDocument {
            test: test.to_string(),
            alpha,
            beta,
            epsilon: res.epsilon,
            dim: res.dim,
            statistic: res.statistic,
            argmax_s: res.argmax_s,
            critical_values: critical_values(table),
            p_value: res.p_value,
            reject: res.decision.map(|d| d.reject),
            level: res.decision.map(|d| d.level),
            trajectory: res.trajectory.clone(),
            skipped: res.skipped.clone(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TwoStageDocument {
    test: String,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    level: f64,
    stage_level: f64,
    outcome: TwoStageOutcome,
    reject: bool,
    stage_one: TestDocument,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    stage_two: Option<TestDocument>,
    warnings: Vec<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct SignificanceRow {
    coefficient: String,
    estimate: f64,
    statistic: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    p_value: Option<f64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct SignificanceDocument {
    alpha: f64,
    epsilon: f64,
    n: usize,
    coefficients: Vec<SignificanceRow>,
    warnings: Vec<String>,
}

fn critical_values(table: &CriticalValueTable) -> BTreeMap<String, f64> {
    table
        .quantiles
        .iter()
        .map(|(p, q)| (p.to_string(), *q))
        .collect()
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, doc: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn load(data: &DataArgs, epsilon: Option<f64>) -> Result<ingest::Ingested> {
    let ing = ingest(&data.data, &data.schema())?;
    if let Some(eps) = epsilon {
        check_rows(&ing.data, eps)?;
    }
    Ok(ing)
}

/// Returns whether the null was rejected.
fn cmd_test(args: &TestArgs) -> Result<bool> {
    let ing = load(&args.data, Some(args.epsilon))?;
    let mut data = ing.data;
    let grid = GridSpec::for_data(&data, args.epsilon)?;
    let mut resolver = args.tables.resolver();
    let k = data.k();
    let (name, beta) = match args.test {
        TestName::Qr => ("qr", None),
        TestName::Covar => ("covar", Some(args.beta)),
        TestName::CovarTwoStage => ("covar-two-stage", Some(args.beta)),
        TestName::Exposure => ("exposure", Some(args.beta)),
    };
    if beta.is_some() && data.z().is_none() {
        bail!(qbreak::Error::MissingZ);
    }
    if let TestName::Exposure = args.test {
        data = data.swap_responses()?;
    }

    if let TestName::CovarTwoStage = args.test {
        let table = resolver.get(LimitKind::Break, k + 1, args.epsilon)?;
        let res = two_stage_covar_test(
            &data, args.alpha, args.beta, &grid, args.level, &table, &table,
        )?;
        let doc = TwoStageDocument {
            test: name.to_string(),
            alpha: args.alpha,
            beta: args.beta,
            epsilon: args.epsilon,
            level: args.level,
            stage_level: res.stage_level,
            outcome: res.outcome,
            reject: res.rejects(),
            stage_one: TestDocument::new("qr", args.alpha, None, &res.stage_one, &table),
            stage_two: res
                .stage_two
                .as_ref()
                .map(|r| TestDocument::new("covar-coefficients", args.alpha, beta, r, &table)),
            warnings: resolver.warnings,
        };
        emit_json(args.out.as_deref(), &doc)?;
        return Ok(doc.reject);
    }

    let (mut res, dim) = match args.test {
        TestName::Qr => (qr_break_test(&data, args.alpha, &grid)?, k + 1),
        _ => (
            covar_break_test(&data, args.alpha, args.beta, &grid)?,
            2 * k + 2,
        ),
    };
    let table = resolver.get(LimitKind::Break, dim, args.epsilon)?;
    res.decide(&table, args.level)?;
    let mut doc = TestDocument::new(name, args.alpha, beta, &res, &table);
    doc.warnings = resolver.warnings;
    emit_json(args.out.as_deref(), &doc)?;
    Ok(doc.reject == Some(true))
}

fn cmd_critvals(args: &CritvalsArgs) -> Result<()> {
    let cfg = SimConfig {
        threads: args.threads,
        ..SimConfig::new(args.dim, args.epsilon, args.grid, args.reps, args.seed)
    };
    let table = match args.law {
        LawName::Break => simulate_limit_u(&cfg)?,
        LawName::Significance => simulate_limit_scalar(&cfg)?,
    };
    if let Some(path) = &args.out {
        store_table(&table, path)?;
    }
    let summary = serde_json::json!({
        "law": match args.law { LawName::Break => "break", LawName::Significance => "significance" },
        "dim": table.dim,
        "epsilon": table.epsilon,
        "grid_points": table.grid_points,
        "replications": table.replications,
        "seed": table.seed,
        "quantiles": critical_values(&table),
    });
    emit_json(None, &summary)
}

fn preset_sweep(preset: Preset, ns: &[usize], reps: usize, seed: u64) -> SweepConfig {
    let base = DgpConfig::reference(1000, Regime::I0 { c: 0.5 }, seed);
    let tests = vec![TestKind::Qr, TestKind::Covar];
    let ns = if ns.is_empty() { &[1000][..] } else { ns };
    let sweep = match preset {
        Preset::Size => SweepAxes {
            n: ns.to_vec(),
            regimes: vec![Regime::I0 { c: 0.5 }, Regime::Ns { kappa: 0.5 }],
            delta: Vec::new(),
            s_star: 0.5,
        },
        Preset::Power => SweepAxes {
            n: ns.to_vec(),
            regimes: Vec::new(),
            delta: vec![-0.25, -0.1, 0.0, 0.1, 0.25],
            s_star: 0.5,
        },
    };
    SweepConfig {
        version: SWEEP_VERSION,
        base,
        experiment: ExperimentSpec {
            replications: reps,
            level: 0.05,
            epsilon: 0.1,
            tests,
            threads: None,
        },
        sweep,
    }
}

fn cmd_mc(args: &McArgs) -> Result<()> {
    let mut sweep = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            SweepConfig::from_toml(&text)?
        }
        (None, Some(p)) => preset_sweep(p, &args.n, 1000, args.tables.seed),
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(r) = args.reps {
        sweep.experiment.replications = r;
    }
    if args.tables.threads.is_some() {
        sweep.experiment.threads = args.tables.threads;
    }
    let mut resolver = args.tables.resolver();
    let mut tables = TableSet::default();
    for dim in sweep.table_dims() {
        tables.insert(resolver.get(LimitKind::Break, dim, sweep.experiment.epsilon)?);
    }
    if sweep.experiment.tests.contains(&TestKind::Significance) {
        tables.insert(resolver.get(LimitKind::Significance, 1, sweep.experiment.epsilon)?);
    }
    for w in &resolver.warnings {
        eprintln!("warning: {w}");
    }
    let records: Vec<CellRecord> = sweep.run(&tables)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in &records {
        writer.serialize(r)?;
    }
    let bytes = writer.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    emit(args.out.as_deref(), &bytes)
}

fn cmd_significance(args: &SignificanceArgs) -> Result<()> {
    let ing = load(&args.data, Some(args.epsilon))?;
    let data = &ing.data;
    let grid = GridSpec::for_data(data, args.epsilon)?;
    let mut resolver = args.tables.resolver();
    let table = resolver.get(LimitKind::Significance, 1, args.epsilon)?;
    let (fwd, _) = qr_paths(data, args.alpha, &grid)?;
    let names = std::iter::once("intercept".to_string()).chain(ing.x_names.iter().cloned());
    let coefficients = names
        .enumerate()
        .map(|(i, name)| {
            let r = sn_significance(&fwd, i, &grid, Some(&table))?;
            Ok(SignificanceRow {
                coefficient: name,
                estimate: r.estimate,
                statistic: r.statistic,
                p_value: r.p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = SignificanceDocument {
        alpha: args.alpha,
        epsilon: args.epsilon,
        n: data.n(),
        coefficients,
        warnings: resolver.warnings,
    };
    emit_json(args.out.as_deref(), &doc)
}

fn cmd_rolling(args: &RollingArgs) -> Result<()> {
    let ing = load(&args.data, None)?;
    let fits = rolling_estimates(&ing.data, args.alpha, args.window)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["window_end".to_string(), "intercept".to_string()];
    header.extend(ing.x_names.iter().cloned());
    writer.write_record(&header)?;
    for f in &fits {
        let last = f.window.1 - 1;
        let label = match &ing.dates {
            Some(d) => d[last].clone(),
            None => last.to_string(),
        };
        let mut rec = vec![label];
        rec.extend(f.coef.iter().map(|c| c.to_string()));
        writer.write_record(&rec)?;
    }
    let bytes = writer.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    emit(args.out.as_deref(), &bytes)
}

fn error_kind(err: &anyhow::Error) -> String {
    if let Some(e) = err.downcast_ref::<IngestError>() {
        return e.kind().to_string();
    }
    if let Some(e) = err.downcast_ref::<qbreak::Error>() {
        let dbg = format!("{e:?}");
        return dbg
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("Error")
            .to_string();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "IoError".to_string();
    }
    "Error".to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Test(a) => cmd_test(a).map(|reject| reject && a.fail_on_reject),
        Command::Critvals(a) => cmd_critvals(a).map(|_| false),
        Command::Mc(a) => cmd_mc(a).map(|_| false),
        Command::Significance(a) => cmd_significance(a).map(|_| false),
        Command::Rolling(a) => cmd_rolling(a).map(|_| false),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            let doc = serde_json::json!({
                "error": error_kind(&e),
                "detail": format!("{e:#}"),
            });
            eprintln!("{doc}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_round_trip() {
        let doc = TestDocument {
            test: "qr".into(),
            alpha: 0.9,
            beta: None,
            epsilon: 0.1,
            dim: 3,
            statistic: 123.456_789_012_345_67,
            argmax_s: 0.437,
            critical_values: [("0.95".to_string(), 139.3)].into_iter().collect(),
            p_value: Some(0.012_5),
            reject: Some(true),
            level: Some(0.05),
            trajectory: vec![TrajectoryPoint {
                s: 0.1,
                value: std::f64::consts::PI,
            }],
            skipped: vec![4, 9],
            warnings: vec!["w".into()],
        };
        let text = serde_json::to_string(&doc).unwrap();
        assert_eq!(serde_json::from_str::<TestDocument>(&text).unwrap(), doc);
        assert!(!text.contains("\"beta\""));

        let sig = SignificanceDocument {
            alpha: 0.5,
            epsilon: 0.1,
            n: 500,
            coefficients: vec![SignificanceRow {
                coefficient: "dp".into(),
                estimate: -1.0 / 3.0,
                statistic: 2.0_f64.sqrt(),
                p_value: None,
            }],
            warnings: Vec::new(),
        };
        let text = serde_json::to_string(&sig).unwrap();
        assert_eq!(
            serde_json::from_str::<SignificanceDocument>(&text).unwrap(),
            sig
        );
    }
}
