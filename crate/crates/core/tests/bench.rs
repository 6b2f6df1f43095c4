use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use geocross::bench::{
    aggregate_seeds, average_datasets, build_ranking_table, cell_ids, emit_report, parse_report_csv, run_cell,
    run_protocol, table_from_records, write_reports, EvalCell, ModelSpec, RankingTable, ReportFormat, ResultStore,
    RunRecord, RunStatus,
};
use geocross::data::{synthetic_dataset, Dataset, SyntheticConfig, TaskKind};
use geocross::finetune::{FinetuneConfig, FinetuneMode};
use geocross::vit::{ChannelVit, FixedChannelVit, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    cells: Vec<String>,
    rows: Vec<FixtureRow>,
}

#[derive(Deserialize)]
struct FixtureRow {
    model: String,
    cells: [f64; 7],
}

fn fixture() -> Fixture {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published_ranking.json");
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn scores_of(f: &Fixture) -> BTreeMap<String, BTreeMap<String, f64>> {
    f.rows
        .iter()
        .map(|r| (r.model.clone(), f.cells.iter().cloned().zip(r.cells).collect()))
        .collect()
}

fn row<'a>(t: &'a RankingTable, model: &str) -> &'a geocross::bench::RankingRow {
    t.rows.iter().find(|r| r.model == model).unwrap()
}

#[test]
fn published_rows_reproduce_the_worked_examples() {
    let f = fixture();
    assert_eq!(f.cells, cell_ids());
    assert_eq!(f.rows.len(), 24);
    let t = build_ranking_table(&scores_of(&f)).unwrap();
    let chi = row(&t, "ChiViT");
    // printed values are two-decimal roundings
    let near = |x: f64, printed: f64| (x - printed).abs() <= 0.005 + 1e-9;
    assert!(near(chi.averages[0], 62.67));
    assert!(near(chi.averages[1], 23.09));
    assert!(near(chi.overall, 44.51));
    assert_eq!(chi.ranks[0], 6);
    let dino = row(&t, "DINOv2");
    assert_eq!(dino.ranks[0], 1);
    assert!(near(dino.averages[0], 63.89));
    // in-distribution ranks follow the averages
    for r in &t.rows {
        let better = t.rows.iter().filter(|o| o.averages[0] > r.averages[0]).count();
        assert!(r.ranks[0] > better);
    }
}

/// Mean over seeds computed by grouping with a linear scan.
fn oracle_mean(records: &[RunRecord], model: &str, dataset: &str, cell: &str) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.model == model && r.dataset == dataset && r.cell == cell && r.status == RunStatus::Ok)
        .filter_map(|r| r.value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn record(model: &str, dataset: &str, cell: &str, seed: u64, value: Option<f64>) -> RunRecord {
    RunRecord {
        model: model.into(),
        dataset: dataset.into(),
        cell: cell.into(),
        seed,
        mode: FinetuneMode::Full,
        metric: "accuracy".into(),
        value,
        wall_time_s: 0.0,
        config_hash: String::new(),
        status: if value.is_some() { RunStatus::Ok } else { RunStatus::Error },
        error: None,
    }
}

#[test]
fn seed_aggregation_matches_brute_force() {
    assert_eq!(aggregate_seeds(&[record("m", "d", "RGB->RGB", 0, Some(0.5))]).values().next(), Some(&0.5));
    let two = [record("m", "d", "c", 0, Some(0.4)), record("m", "d", "c", 1, Some(0.6))];
    assert!((aggregate_seeds(&two)[&("m".into(), "d".into(), "c".into())] - 0.5).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cells = cell_ids();
    for _ in 0..200 {
        let n = rng.gen_range(1..60);
        let recs: Vec<RunRecord> = (0..n)
            .map(|i| {
                let v = rng.gen_bool(0.9).then(|| rng.gen_range(0.0..1.0));
                record(
                    ["a", "b"][rng.gen_range(0..2)],
                    ["x", "y", "z"][rng.gen_range(0..3)],
                    &cells[rng.gen_range(0..7)],
                    i,
                    v,
                )
            })
            .collect();
        let agg = aggregate_seeds(&recs);
        let keys: BTreeSet<_> = recs.iter().map(|r| (r.model.clone(), r.dataset.clone(), r.cell.clone())).collect();
        for (m, d, c) in keys {
            let want = oracle_mean(&recs, &m, &d, &c);
            let got = agg.get(&(m, d, c)).copied();
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12),
                (g, w) => assert_eq!(g, w),
            }
        }
    }
}

#[test]
fn datasets_are_weighted_equally() {
    let mut per = BTreeMap::new();
    per.insert(("m".to_string(), "big".to_string(), "RGB->RGB".to_string()), 0.9);
    per.insert(("m".to_string(), "small".to_string(), "RGB->RGB".to_string()), 0.3);
    let avg = average_datasets(&per);
    assert!((avg["m"]["RGB->RGB"] - 0.6).abs() < 1e-15);
}

#[test]
fn overall_average_ignores_cell_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = cell_ids();
    for _ in 0..100 {
        let vals: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..100.0)).collect();
        let table = |order: &[usize]| {
            let cells: BTreeMap<String, f64> = order.iter().map(|&i| (ids[i].clone(), vals[i])).collect();
            build_ranking_table(&BTreeMap::from([("m".to_string(), cells)])).unwrap()
        };
        let base = table(&[0, 1, 2, 3, 4, 5, 6]);
        let shuffled = table(&[6, 2, 4, 0, 5, 1, 3]);
        assert_eq!(base, shuffled);
        let mut perm = vals.clone();
        perm.reverse();
        let mean_perm = perm.iter().sum::<f64>() / 7.0;
        assert!((base.rows[0].overall - mean_perm).abs() < 1e-12);
    }
}

#[test]
fn csv_round_trips_and_emission_is_deterministic() {
    let t = build_ranking_table(&scores_of(&fixture())).unwrap();
    let csv = emit_report(&t, ReportFormat::Csv);
    assert_eq!(parse_report_csv(&csv).unwrap(), t);
    for f in [ReportFormat::Csv, ReportFormat::Text, ReportFormat::Radar] {
        assert_eq!(emit_report(&t, f).as_bytes(), emit_report(&t, f).as_bytes());
    }
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("model,RGB->RGB,S2->S2,ID AVG,ID #,RGB->S1"), "{header}");
    assert_eq!(emit_report(&t, ReportFormat::Radar).lines().count(), 1 + 24 * 7);

    let dir = tempfile::tempdir().unwrap();
    let paths = write_reports(&t, &[ReportFormat::Csv, ReportFormat::Text], dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(fs::read_to_string(&paths[0]).unwrap(), csv);
}

fn tiny_model(name: &str) -> ModelSpec {
    let cfg = VitConfig {
        image_size: 16,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        ..Default::default()
    };
    ModelSpec {
        name: name.into(),
        backbone: Box::new(ChannelVit::new(cfg, 1).unwrap()),
        finetune: FinetuneConfig {
            warmup_epochs: 1,
            decay_epochs: Some(1),
            batch_size: Some(4),
            ..Default::default()
        },
    }
}

fn tiny_data() -> Dataset {
    let cfg = SyntheticConfig {
        size: 16,
        train: 8,
        val: 4,
        test: 4,
        seed: 5,
        ..Default::default()
    };
    synthetic_dataset("tiny", &cfg, TaskKind::Classification).unwrap()
}

#[test]
fn protocol_counts_and_resumes_without_duplicates() {
    let models = [tiny_model("m")];
    let data = [tiny_data()];
    let seeds: Vec<u64> = (0..5).collect();
    let dir = tempfile::tempdir().unwrap();

    let fresh_path = dir.path().join("fresh.jsonl");
    let fresh = run_protocol(&models, &data, &seeds, FinetuneMode::Full, &ResultStore::open(&fresh_path).unwrap(), 2)
        .unwrap();
    assert_eq!(fresh.len(), 35);
    assert!(fresh.iter().all(|r| r.status == RunStatus::Ok && r.metric == "accuracy"));
    let keys: BTreeSet<_> = fresh.iter().map(RunRecord::key).collect();
    assert_eq!(keys.len(), 35);

    // interrupted run: two seeds done, then a torn write
    let path = dir.path().join("resumed.jsonl");
    run_protocol(&models, &data, &seeds[..2], FinetuneMode::Full, &ResultStore::open(&path).unwrap(), 1).unwrap();
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"model\":\"m\",\"data");
    fs::write(&path, text).unwrap();
    let store = ResultStore::open(&path).unwrap();
    assert_eq!(store.records().unwrap().len(), 14);
    let resumed = run_protocol(&models, &data, &seeds, FinetuneMode::Full, &store, 1).unwrap();
    let lines = store.records().unwrap();
    assert_eq!(lines.len(), 35);
    assert_eq!(lines.iter().map(RunRecord::key).collect::<BTreeSet<_>>().len(), 35);
    assert_eq!(resumed.len(), 35);
    for (a, b) in resumed.iter().zip(&fresh) {
        assert!(a.same_result(b), "{a:?} vs {b:?}");
    }

    // a second pass has nothing left to do
    run_protocol(&models, &data, &seeds, FinetuneMode::Full, &store, 1).unwrap();
    assert_eq!(store.records().unwrap().len(), 35);

    let table = table_from_records(&lines, Some(FinetuneMode::Full)).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table_from_records(&lines, Some(FinetuneMode::Frozen)).unwrap().rows.is_empty());
}

#[test]
fn cell_rerun_is_bit_identical() {
    let m = tiny_model("m");
    let d = tiny_data();
    let cell = EvalCell::parse("RGB->S1").unwrap();
    let a = run_cell(&m, &d, &cell, 3, FinetuneMode::Full);
    let b = run_cell(&m, &d, &cell, 3, FinetuneMode::Full);
    assert_eq!(a.status, RunStatus::Ok);
    assert!(a.same_result(&b));
    assert_eq!(a.value.unwrap().to_bits(), b.value.unwrap().to_bits());
    assert_eq!(a.config_hash.len(), 64);
    let c = run_cell(&m, &d, &cell, 4, FinetuneMode::Full);
    assert_ne!(a.config_hash, c.config_hash);
}

#[test]
fn unsupported_cells_become_error_records() {
    let cfg = VitConfig {
        image_size: 16,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        in_channels: 3,
        ..Default::default()
    };
    let mut fixed = FixedChannelVit::new(cfg, 1).unwrap();
    fixed.adapt_at_test = false;
    let spec = ModelSpec {
        backbone: Box::new(fixed),
        ..tiny_model("fixed")
    };
    let d = tiny_data();
    let bad = run_cell(&spec, &d, &EvalCell::parse("RGB->S1").unwrap(), 0, FinetuneMode::Full);
    assert_eq!(bad.status, RunStatus::Error);
    assert!(bad.value.is_none());
    assert!(bad.error.as_deref().unwrap().contains("unsupported evaluation cell"));
    let ok = run_cell(&spec, &d, &EvalCell::parse("RGB->RGB").unwrap(), 0, FinetuneMode::Full);
    assert_eq!(ok.status, RunStatus::Ok);
}

#[test]
fn missing_bands_are_reported() {
    let mut d = tiny_data();
    d.manifest.bands.retain(|b| b.as_str() != "VV");
    let r = run_cell(&tiny_model("m"), &d, &EvalCell::parse("S2->S2+S1").unwrap(), 0, FinetuneMode::Full);
    assert_eq!(r.status, RunStatus::Error);
    assert!(r.error.unwrap().contains("VV"));
}
