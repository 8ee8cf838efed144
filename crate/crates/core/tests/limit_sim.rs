use std::fs;

use qbreak::limit_sim::{
    load_table, simulate_limit_scalar, simulate_limit_u, store_table, LimitKind, SimConfig,
    TableCache, DEFAULT_PROBS,
};
use qbreak::Error;

#[test]
fn same_seed_same_table_regardless_of_threads() {
    let cfg = SimConfig::new(2, 0.1, 300, 400, 11);
    let a = simulate_limit_u(&cfg).unwrap();
    let b = simulate_limit_u(&SimConfig {
        threads: Some(1),
        ..cfg.clone()
    })
    .unwrap();
    let c = simulate_limit_u(&SimConfig {
        threads: Some(3),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let other = simulate_limit_u(&SimConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.raw_sample, other.raw_sample);
}

#[test]
fn quantiles_increase_in_dimension_and_probability() {
    let mut prev: Option<Vec<(f64, f64)>> = None;
    for d in 1..=3 {
        let t = simulate_limit_u(&SimConfig::new(d, 0.1, 400, 2000, 5)).unwrap();
        assert_eq!(t.quantiles.len(), DEFAULT_PROBS.len());
        for w in t.quantiles.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        if let Some(p) = prev {
            for (a, b) in p.iter().zip(&t.quantiles) {
                assert!(a.1 < b.1, "d={d}: {a:?} vs {b:?}");
            }
        }
        prev = Some(t.quantiles);
    }
}

#[test]
fn scalar_law_is_positive_and_stable_in_replications() {
    let a = simulate_limit_scalar(&SimConfig::new(1, 0.1, 500, 4000, 9)).unwrap();
    let b = simulate_limit_scalar(&SimConfig::new(1, 0.1, 500, 8000, 9)).unwrap();
    assert!(a.raw_sample.as_ref().unwrap()[0] >= 0.0);
    assert_eq!(a.kind, LimitKind::Significance);
    // Doubling R changes the 90% quantile only by Monte Carlo noise.
    let (qa, qb) = (a.quantile(0.9).unwrap(), b.quantile(0.9).unwrap());
    assert!((qa - qb).abs() / qb < 0.1, "{qa} vs {qb}");
    // Replication r uses stream r, so the smaller run is a sub-sample.
    let sb = b.raw_sample.unwrap();
    for v in a.raw_sample.unwrap() {
        assert!(sb.binary_search_by(|x| x.total_cmp(&v)).is_ok());
    }
}

#[test]
fn independent_seeds_agree_in_distribution() {
    let a = simulate_limit_u(&SimConfig::new(1, 0.1, 300, 3000, 1)).unwrap();
    let b = simulate_limit_u(&SimConfig::new(1, 0.1, 300, 3000, 2)).unwrap();
    let (ma, mb) = (a.quantile(0.5).unwrap(), b.quantile(0.5).unwrap());
    assert!((ma - mb).abs() / ma < 0.1);
}

#[test]
fn table_round_trip_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let t = simulate_limit_u(&SimConfig::new(2, 0.1, 200, 300, 4)).unwrap();
    store_table(&t, &path).unwrap();
    let back = load_table(&path).unwrap();
    assert_eq!(back, t);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"0.975\""));

    let bumped = text.replace("\"version\": 1", "\"version\": 99");
    fs::write(&path, bumped).unwrap();
    assert!(matches!(
        load_table(&path),
        Err(Error::SchemaMismatch { .. })
    ));

    store_table(&t, &path).unwrap();
    let bin = path.with_extension("bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_table(&path), Err(Error::Io { .. })));
    assert!(matches!(
        load_table(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn cache_reuses_stored_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TableCache::new(dir.path());
    let cfg = SimConfig::new(1, 0.1, 200, 200, 8);
    assert!(cache.get(LimitKind::Break, &cfg).is_none());
    let a = cache.get_or_simulate(LimitKind::Break, &cfg).unwrap();
    assert!(cache.path_for(LimitKind::Break, &cfg).exists());
    let b = cache.get(LimitKind::Break, &cfg).unwrap();
    assert_eq!(a, b);
}
