use sgic::controller::{DiffusionPlan, OracleLabel};
use sgic::harness::{
    check_ablation_csv, cmd_corpus, read_labels, write_labels, HarnessError, RunConfig, AGGREGATE_HEADER,
};
use sgic::scenes::load_corpus;

fn ablation_csv(rows: &[[&str; 14]]) -> String {
    let mut s = AGGREGATE_HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

const FULL: [&str; 14] = ["sgic", "full", "3", "20", "0", "0.35", "0.7", "0.8", "0.6", "27.5", "0.08", "0.1", "5", "1"];
const GRID: [&str; 14] =
    ["sgic", "no_clipseg", "3", "20", "0", "0.45", "0.7", "0.8", "0.6", "27.5", "0.08", "0.1", "5", "1"];
const FIXED: [&str; 14] = ["sgic", "no_cad", "3", "20", "0", "0.35", "0.6", "0.7", "0.5", "26.0", "0.2", "0.1", "40", "4"];

#[test]
fn well_formed_ablation_table_passes() {
    let rows = check_ablation_csv(&ablation_csv(&[FULL, GRID, FIXED])).unwrap();
    assert_eq!(rows.len(), 3);
    let base = DiffusionPlan::baseline();
    assert_eq!((base.steps, base.cfg), (40, 4.0));
}

#[test]
fn ablation_schema_violations_are_rejected() {
    let mut cheap_grid = GRID;
    cheap_grid[5] = "0.30";
    let mut fixed_moved = FIXED;
    fixed_moved[12] = "20";
    let mut out_of_range = FULL;
    out_of_range[6] = "1.2";
    let mut failures = FULL;
    failures[4] = "2";
    let cases = [
        ablation_csv(&[FULL, GRID]),
        ablation_csv(&[FULL, FULL, FIXED]),
        ablation_csv(&[FULL, cheap_grid, FIXED]),
        ablation_csv(&[FULL, GRID, fixed_moved]),
        ablation_csv(&[out_of_range, GRID, FIXED]),
        ablation_csv(&[failures, GRID, FIXED]),
        ablation_csv(&[FULL, GRID, FIXED]).replacen("bpp", "bits", 1),
    ];
    for (i, text) in cases.iter().enumerate() {
        assert!(check_ablation_csv(text).is_err(), "case {i} accepted");
    }
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"dataset": "imgs", "seed": 7, "timing": {"images": 3}}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset, dir.path().join("imgs"));
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.timing.images, 3);
    assert_eq!(cfg.timing.repetitions, RunConfig::default().timing.repetitions);
    cfg.validate().unwrap();
}

#[test]
fn bad_configs_map_to_usage_exit_code() {
    for text in [r#"{"qualty": 3}"#, r#"{"mode": "turbo"}"#, "not json"] {
        let err = RunConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{text}");
    }
    let cfg = RunConfig {
        masked_strength: 1.5,
        ..RunConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    let missing = RunConfig::require_path(std::path::Path::new("/no/such/file")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    assert_eq!(missing.to_json()["exit_code"], 2);
}

#[test]
fn label_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.csv");
    let labels = vec![
        OracleLabel {
            image_id: "a".into(),
            best_steps: 5,
            best_cfg: 1.0,
            best_score: 0.0812345678901234,
            y_steps: 3.0 / 78.0,
            y_cfg: 0.1,
        },
        OracleLabel {
            image_id: "b, with comma".into(),
            best_steps: 80,
            best_cfg: 9.5,
            best_score: 1e-17,
            y_steps: 1.0 - 1e-6,
            y_cfg: 0.95,
        },
    ];
    write_labels(&path, &labels).unwrap();
    assert_eq!(read_labels(&path).unwrap(), labels);
}

#[test]
fn label_hash_tracks_inputs() {
    let cfg = RunConfig::default();
    let ids = vec!["x".to_string(), "y".to_string()];
    let h = cfg.label_hash(&ids);
    assert_eq!(h.len(), 16);
    assert_eq!(h, cfg.label_hash(&ids));
    assert_ne!(h, cfg.label_hash(&ids[..1]));
    let other = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    assert_ne!(h, other.label_hash(&ids));
}

#[test]
fn generated_corpus_matches_the_shipped_one() {
    let dir = tempfile::tempdir().unwrap();
    let files = cmd_corpus(dir.path(), 3).unwrap();
    assert_eq!(files.len(), 3);
    let (fresh, fresh_desc) = load_corpus(dir.path()).unwrap();
    let (shipped, _) = load_corpus(&sgic::scenes::default_corpus_dir()).unwrap();
    assert_eq!(fresh.len(), 3);
    for (a, b) in fresh.iter().zip(&shipped) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
    }
    assert!(fresh_desc.is_some());
}
