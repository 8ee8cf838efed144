//! Locating critical-value tables: explicit files, then the cache, then a
//! quick simulation.

use std::path::PathBuf;

use qbreak::limit_sim::{
    self, load_table, CriticalValueTable, LimitKind, SimConfig, TableCache, DEFAULT_GRID,
    DEFAULT_REPS, DESK_GRID, DESK_REPS,
};

pub struct Resolver {
    pub files: Vec<PathBuf>,
    pub cache: Option<TableCache>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub warnings: Vec<String>,
}

impl Resolver {
    pub fn new(
        files: Vec<PathBuf>,
        cache_dir: Option<PathBuf>,
        seed: u64,
        threads: Option<usize>,
    ) -> Self {
        Resolver {
            files,
            cache: cache_dir.map(TableCache::new),
            seed,
            threads,
            warnings: Vec::new(),
        }
    }

    pub fn get(
        &mut self,
        kind: LimitKind,
        dim: usize,
        epsilon: f64,
    ) -> qbreak::Result<CriticalValueTable> {
        for path in &self.files {
            let table = load_table(path)?;
            let dim_ok = kind == LimitKind::Significance || table.dim == dim;
            if table.kind == kind && dim_ok && (table.epsilon - epsilon).abs() < 1e-12 {
                return Ok(table);
            }
        }
        let cfg = |grid, reps| SimConfig {
            threads: self.threads,
            ..SimConfig::new(dim, epsilon, grid, reps, self.seed)
        };
        if let Some(cache) = &self.cache {
            for (grid, reps) in [(DEFAULT_GRID, DEFAULT_REPS), (DESK_GRID, DESK_REPS)] {
                if let Some(t) = cache.get(kind, &cfg(grid, reps)) {
                    return Ok(t);
                }
            }
        }
        let desk = cfg(DESK_GRID, DESK_REPS);
        let what = match kind {
            LimitKind::Break => format!("dimension {dim}"),
            LimitKind::Significance => "the significance law".to_string(),
        };
        self.warnings.push(format!(
            "no stored table for {what} at epsilon {epsilon}; simulated one with {DESK_GRID} grid points and {DESK_REPS} replications"
        ));
        match &self.cache {
            Some(cache) => cache.get_or_simulate(kind, &desk),
            None => match kind {
                LimitKind::Break => limit_sim::simulate_limit_u(&desk),
                LimitKind::Significance => limit_sim::simulate_limit_scalar(&desk),
            },
        }
    }
}
