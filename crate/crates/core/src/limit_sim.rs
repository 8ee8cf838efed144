//! Monte Carlo simulation of the self-normalized limit laws and storage of
//! the resulting critical-value tables.
//!
//! Replication `r` draws from its own ChaCha8 stream (`seed`, stream `r`),
//! so a table depends only on its parameters and seed, never on how
//! replications are spread over threads.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::regression::trim_index;

pub const TABLE_VERSION: u32 = 1;
pub const GENERATOR: &str = "chacha8-stream/ziggurat";
pub const DEFAULT_PROBS: [f64; 6] = [0.80, 0.90, 0.95, 0.975, 0.99, 0.995];
pub const DEFAULT_GRID: usize = 5000;
pub const DEFAULT_REPS: usize = 100_000;
pub const DESK_GRID: usize = 1000;
pub const DESK_REPS: usize = 10_000;

const MAX_CONDITION: f64 = 1e12;
const DENOMINATOR_FLOOR: f64 = 1e-14;

/// Which limit law a table describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    /// `sup_s B(s)' W(s)^{-1} B(s)` for a `dim`-variate Brownian motion.
    Break,
    /// `W(1)^2 / int_eps^1 (W(s) - s W(1))^2 ds`.
    Significance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dim: usize,
    pub epsilon: f64,
    pub grid_points: usize,
    pub replications: usize,
    pub seed: u64,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(
        dim: usize,
        epsilon: f64,
        grid_points: usize,
        replications: usize,
        seed: u64,
    ) -> Self {
        SimConfig {
            dim,
            epsilon,
            grid_points,
            replications,
            seed,
            threads: None,
        }
    }

    fn validate(&self, kind: LimitKind) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dim == 0 {
            return bad("dimension must be at least 1".into());
        }
        if self.grid_points < 100 {
            return bad(format!(
                "grid must have at least 100 points, got {}",
                self.grid_points
            ));
        }
        if self.replications < 100 {
            return bad(format!(
                "need at least 100 replications, got {}",
                self.replications
            ));
        }
        let upper = match kind {
            LimitKind::Break => 0.5,
            LimitKind::Significance => 1.0,
        };
        if !(self.epsilon > 0.0 && self.epsilon < upper) {
            return bad(format!(
                "epsilon must lie in (0, {upper}), got {}",
                self.epsilon
            ));
        }
        if self.threads == Some(0) {
            return bad("thread cap must be positive".into());
        }
        Ok(())
    }
}

/// Simulated quantiles of a limit law.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticalValueTable {
    pub kind: LimitKind,
    pub dim: usize,
    pub epsilon: f64,
    pub grid_points: usize,
    pub replications: usize,
    pub seed: u64,
    pub generator: String,
    /// `(probability, quantile)`, increasing in probability.
    pub quantiles: Vec<(f64, f64)>,
    /// Sorted simulated draws, when retained.
    pub raw_sample: Option<Vec<f64>>,
    /// Grid points skipped (break law) or draws redrawn (significance law).
    pub skipped: usize,
}

impl CriticalValueTable {
    fn from_sample(kind: LimitKind, cfg: &SimConfig, mut sample: Vec<f64>, skipped: usize) -> Self {
        sample.sort_unstable_by(f64::total_cmp);
        let quantiles = DEFAULT_PROBS
            .iter()
            .map(|&p| (p, empirical_quantile(&sample, p)))
            .collect();
        CriticalValueTable {
            kind,
            dim: cfg.dim,
            epsilon: cfg.epsilon,
            grid_points: cfg.grid_points,
            replications: cfg.replications,
            seed: cfg.seed,
            generator: GENERATOR.to_string(),
            quantiles,
            raw_sample: Some(sample),
            skipped,
        }
    }

    /// The stored `prob`-quantile, or one computed from the raw sample.
    pub fn quantile(&self, prob: f64) -> Option<f64> {
        self.quantiles
            .iter()
            .find(|(p, _)| (p - prob).abs() < 1e-12)
            .map(|(_, q)| *q)
            .or_else(|| {
                self.raw_sample
                    .as_deref()
                    .map(|s| empirical_quantile(s, prob))
            })
    }

    /// Critical value for a level-`level` test.
    pub fn critical_value(&self, level: f64) -> Option<f64> {
        self.quantile(1.0 - level)
    }

    /// Fraction of simulated draws at or above `stat`.
    pub fn p_value(&self, stat: f64) -> Option<f64> {
        let s = self.raw_sample.as_deref()?;
        let below = s.partition_point(|&v| v < stat);
        Some((s.len() - below) as f64 / s.len() as f64)
    }
}

/// Linear-interpolation sample quantile (Hyndman-Fan type 7) of sorted data.
pub fn empirical_quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

fn run_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map(|pool| pool.install(job))
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}"))),
    }
}

/// Scratch buffers for one break-law replication.
struct BreakWorkspace {
    d: usize,
    /// Brownian path, `(m + 1) x d`.
    path: Vec<f64>,
    /// Suffix sums of the second integrand, per grid point.
    suffix_outer: Vec<f64>,
    suffix_lin: Vec<f64>,
    suffix_scalar: Vec<f64>,
    mat: Vec<f64>,
    bridge: Vec<f64>,
    work: Vec<f64>,
}

impl BreakWorkspace {
    fn new(d: usize, m: usize) -> Self {
        BreakWorkspace {
            d,
            path: vec![0.0; (m + 1) * d],
            suffix_outer: vec![0.0; (m + 1) * d * d],
            suffix_lin: vec![0.0; (m + 1) * d],
            suffix_scalar: vec![0.0; m + 1],
            mat: vec![0.0; d * d],
            bridge: vec![0.0; d],
            work: vec![0.0; d],
        }
    }
}

fn brownian_path(rng: &mut ChaCha8Rng, path: &mut [f64], d: usize, m: usize) {
    let sd = (1.0 / m as f64).sqrt();
    path[..d].iter_mut().for_each(|v| *v = 0.0);
    for i in 1..=m {
        for c in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            path[i * d + c] = path[(i - 1) * d + c] + sd * z;
        }
    }
}

/// One draw of the break-law functional on the `m`-point grid.
///
/// For grid point `s = i/m` in `[eps, 1 - eps]` the normalizer is the
/// Riemann sum (weight `1/m`) of
/// `{W(r) - (r/s) W(s)}{..}'` over `r` in `[eps, s]` plus
/// `{V(r) - ((1-r)/(1-s)) V(s)}{..}'` over `r` in `[s, 1 - eps]`, with
/// `V(r) = W(1) - W(r)`. Both sums are expanded into running prefix and
/// suffix moments so each grid point costs `O(d^2)`.
fn break_functional(ws: &mut BreakWorkspace, m: usize, lo: usize, hi: usize) -> (f64, usize) {
    let d = ws.d;
    let mf = m as f64;
    let w1: Vec<f64> = ws.path[m * d..(m + 1) * d].to_vec();

    // Suffix moments of V over r = i..=hi.
    let mut outer = vec![0.0; d * d];
    let mut lin = vec![0.0; d];
    let mut scalar = 0.0;
    let mut v = vec![0.0; d];
    for i in (lo..=hi).rev() {
        let wr = &ws.path[i * d..(i + 1) * d];
        for c in 0..d {
            v[c] = w1[c] - wr[c];
        }
        let u = 1.0 - i as f64 / mf;
        for a in 0..d {
            lin[a] += u * v[a];
            for b in 0..=a {
                outer[a * d + b] += v[a] * v[b];
            }
        }
        scalar += u * u;
        ws.suffix_outer[i * d * d..(i + 1) * d * d].copy_from_slice(&outer);
        ws.suffix_lin[i * d..(i + 1) * d].copy_from_slice(&lin);
        ws.suffix_scalar[i] = scalar;
    }

    let mut p_outer = vec![0.0; d * d];
    let mut p_lin = vec![0.0; d];
    let mut p_scalar = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut skipped = 0;
    for i in lo..=hi {
        let s = i as f64 / mf;
        let ws_i = &ws.path[i * d..(i + 1) * d];
        let r = s;
        for a in 0..d {
            p_lin[a] += r * ws_i[a];
            for b in 0..=a {
                p_outer[a * d + b] += ws_i[a] * ws_i[b];
            }
        }
        p_scalar += r * r;
        for c in 0..d {
            v[c] = w1[c] - ws_i[c];
            ws.bridge[c] = ws_i[c] - s * w1[c];
        }
        let q_outer = &ws.suffix_outer[i * d * d..(i + 1) * d * d];
        let q_lin = &ws.suffix_lin[i * d..(i + 1) * d];
        let q_scalar = ws.suffix_scalar[i];
        let inv_s = 1.0 / s;
        let inv_1s = 1.0 / (1.0 - s);
        for a in 0..d {
            for b in 0..=a {
                let first = p_outer[a * d + b] - inv_s * (p_lin[a] * ws_i[b] + ws_i[a] * p_lin[b])
                    + inv_s * inv_s * p_scalar * ws_i[a] * ws_i[b];
                let second = q_outer[a * d + b] - inv_1s * (q_lin[a] * v[b] + v[a] * q_lin[b])
                    + inv_1s * inv_1s * q_scalar * v[a] * v[b];
                ws.mat[a * d + b] = (first + second) / mf;
            }
        }
        if !linalg::cholesky_in_place(&mut ws.mat, d)
            || linalg::chol_condition_estimate(&ws.mat, d) >= MAX_CONDITION
        {
            skipped += 1;
            continue;
        }
        let val = linalg::chol_quad_form(&ws.mat, d, &ws.bridge, &mut ws.work);
        if val > best {
            best = val;
        }
    }
    (best, skipped)
}

/// Simulates the break-test limit law for coefficient dimension `dim`.
pub fn simulate_limit_u(cfg: &SimConfig) -> Result<CriticalValueTable> {
    cfg.validate(LimitKind::Break)?;
    let m = cfg.grid_points;
    let d = cfg.dim;
    let lo = trim_index(m, cfg.epsilon).max(1);
    let hi = m - trim_index(m, cfg.epsilon).max(1);
    let grid = hi - lo + 1;
    let draws: Vec<(f64, usize)> = run_pool(cfg.threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map_init(
                || BreakWorkspace::new(d, m),
                |ws, rep| {
                    let mut rng = replication_rng(cfg.seed, rep as u64);
                    brownian_path(&mut rng, &mut ws.path, d, m);
                    break_functional(ws, m, lo, hi)
                },
            )
            .collect()
    })?;
    let mut skipped = 0;
    let mut sample = Vec::with_capacity(draws.len());
    for (v, s) in draws {
        if s * 10 > grid || !v.is_finite() {
            return Err(Error::TooManySkippedPoints {
                skipped: s,
                total: grid,
            });
        }
        skipped += s;
        sample.push(v);
    }
    Ok(CriticalValueTable::from_sample(
        LimitKind::Break,
        cfg,
        sample,
        skipped,
    ))
}

/// Simulates `W(1)^2 / int_eps^1 (W(s) - s W(1))^2 ds` (scalar BM). `dim`
/// is ignored.
pub fn simulate_limit_scalar(cfg: &SimConfig) -> Result<CriticalValueTable> {
    let cfg = SimConfig {
        dim: 1,
        ..cfg.clone()
    };
    cfg.validate(LimitKind::Significance)?;
    let m = cfg.grid_points;
    let lo = trim_index(m, cfg.epsilon).max(1);
    let draws: Vec<(f64, usize)> = run_pool(cfg.threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map_init(
                || vec![0.0; m + 1],
                |path, rep| {
                    let mut rng = replication_rng(cfg.seed, rep as u64);
                    let mut redraws = 0;
                    loop {
                        brownian_path(&mut rng, path, 1, m);
                        let w1 = path[m];
                        let denom = (lo..=m)
                            .map(|i| {
                                let b = path[i] - (i as f64 / m as f64) * w1;
                                b * b
                            })
                            .sum::<f64>()
                            / m as f64;
                        if denom >= DENOMINATOR_FLOOR {
                            return (w1 * w1 / denom, redraws);
                        }
                        redraws += 1;
                    }
                },
            )
            .collect()
    })?;
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    if redraws * 1000 > cfg.replications {
        return Err(Error::ZeroDenominator {
            redraws,
            replications: cfg.replications,
        });
    }
    let sample = draws.into_iter().map(|d| d.0).collect();
    Ok(CriticalValueTable::from_sample(
        LimitKind::Significance,
        &cfg,
        sample,
        redraws,
    ))
}

#[derive(Serialize, Deserialize)]
struct TableDocument {
    version: u32,
    #[serde(default = "default_kind")]
    statistic: LimitKind,
    dim: usize,
    epsilon: f64,
    grid_points: usize,
    replications: usize,
    seed: u64,
    generator: String,
    quantiles: BTreeMap<String, f64>,
    #[serde(default)]
    skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_sample_path: Option<String>,
}

fn default_kind() -> LimitKind {
    LimitKind::Break
}

fn prob_key(p: f64) -> String {
    format!("{p}")
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn raw_sample_file(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Stores the table as versioned JSON; the raw sample (if any) goes to a
/// sibling `.bin` file of little-endian `f64`s behind a `u64` count.
pub fn store_table(table: &CriticalValueTable, path: &Path) -> Result<()> {
    let raw_sample_path = match &table.raw_sample {
        Some(sample) => {
            let bin = raw_sample_file(path);
            let mut bytes = Vec::with_capacity(8 + 8 * sample.len());
            bytes.extend_from_slice(&(sample.len() as u64).to_le_bytes());
            for v in sample {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write_atomic(&bin, &bytes)?;
            bin.file_name().and_then(|s| s.to_str()).map(str::to_string)
        }
        None => None,
    };
    let doc = TableDocument {
        version: TABLE_VERSION,
        statistic: table.kind,
        dim: table.dim,
        epsilon: table.epsilon,
        grid_points: table.grid_points,
        replications: table.replications,
        seed: table.seed,
        generator: table.generator.clone(),
        quantiles: table
            .quantiles
            .iter()
            .map(|&(p, q)| (prob_key(p), q))
            .collect(),
        skipped: table.skipped,
        raw_sample_path,
    };
    let mut json = serde_json::to_vec_pretty(&doc).expect("table serializes");
    json.push(b'\n');
    write_atomic(path, &json)
}

pub fn load_table(path: &Path) -> Result<CriticalValueTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        )
    })?;
    let version = value.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(TABLE_VERSION)) {
        return Err(Error::SchemaMismatch {
            path: path.to_path_buf(),
            detail: format!("expected version {TABLE_VERSION}, found {version:?}"),
        });
    }
    let doc: TableDocument = serde_json::from_value(value).map_err(|e| Error::SchemaMismatch {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut quantiles = Vec::with_capacity(doc.quantiles.len());
    for (k, v) in &doc.quantiles {
        let p: f64 = k.parse().map_err(|_| Error::SchemaMismatch {
            path: path.to_path_buf(),
            detail: format!("bad probability key {k:?}"),
        })?;
        quantiles.push((p, *v));
    }
    quantiles.sort_by(|a, b| a.0.total_cmp(&b.0));
    let raw_sample = match &doc.raw_sample_path {
        Some(name) => {
            let bin = path.parent().unwrap_or(Path::new(".")).join(name);
            Some(read_raw_sample(&bin)?)
        }
        None => None,
    };
    Ok(CriticalValueTable {
        kind: doc.statistic,
        dim: doc.dim,
        epsilon: doc.epsilon,
        grid_points: doc.grid_points,
        replications: doc.replications,
        seed: doc.seed,
        generator: doc.generator,
        quantiles,
        raw_sample,
        skipped: doc.skipped,
    })
}

fn read_raw_sample(path: &Path) -> Result<Vec<f64>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let count = u64::from_le_bytes(head) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 8 {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("expected {count} values, found {} bytes", bytes.len()),
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Directory of simulated tables keyed by law, dimension, trimming, grid
/// and replication count.
#[derive(Clone, Debug)]
pub struct TableCache {
    dir: PathBuf,
}

impl TableCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TableCache { dir: dir.into() }
    }

    pub fn path_for(&self, kind: LimitKind, cfg: &SimConfig) -> PathBuf {
        let tag = match kind {
            LimitKind::Break => format!("u_d{}", cfg.dim),
            LimitKind::Significance => "scalar".to_string(),
        };
        self.dir.join(format!(
            "{tag}_eps{}_m{}_r{}.json",
            cfg.epsilon, cfg.grid_points, cfg.replications
        ))
    }

    pub fn get(&self, kind: LimitKind, cfg: &SimConfig) -> Option<CriticalValueTable> {
        load_table(&self.path_for(kind, cfg)).ok()
    }

    /// Loads the cached table or simulates and stores it.
    pub fn get_or_simulate(&self, kind: LimitKind, cfg: &SimConfig) -> Result<CriticalValueTable> {
        if let Some(t) = self.get(kind, cfg) {
            return Ok(t);
        }
        let table = match kind {
            LimitKind::Break => simulate_limit_u(cfg)?,
            LimitKind::Significance => simulate_limit_scalar(cfg)?,
        };
        store_table(&table, &self.path_for(kind, cfg))?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_keys() {
        assert_eq!(prob_key(0.8), "0.8");
        assert_eq!(prob_key(0.975), "0.975");
        assert_eq!(prob_key(0.995), "0.995");
    }

    #[test]
    fn type7_quantile() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&s, 0.0), 1.0);
        assert_eq!(empirical_quantile(&s, 1.0), 4.0);
        assert!((empirical_quantile(&s, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(simulate_limit_u(&SimConfig::new(0, 0.1, 1000, 1000, 1)).is_err());
        assert!(simulate_limit_u(&SimConfig::new(1, 0.1, 50, 1000, 1)).is_err());
        assert!(simulate_limit_u(&SimConfig::new(1, 0.1, 1000, 0, 1)).is_err());
        assert!(simulate_limit_u(&SimConfig::new(1, 0.5, 1000, 1000, 1)).is_err());
    }

    #[test]
    fn p_value_counts_exceedances() {
        let cfg = SimConfig::new(1, 0.1, 100, 100, 1);
        let t = CriticalValueTable::from_sample(
            LimitKind::Break,
            &cfg,
            (1..=100).map(f64::from).collect(),
            0,
        );
        assert_eq!(t.p_value(95.5), Some(0.05));
        assert_eq!(t.p_value(0.0), Some(1.0));
        assert_eq!(t.p_value(1000.0), Some(0.0));
    }
}
