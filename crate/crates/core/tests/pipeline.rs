use std::collections::BTreeMap;
use std::path::Path;

use redcast::forecast::ModelKind;
use redcast::report::*;

fn light(dir: &Path, n_days: usize) -> PipelineConfig {
    let corpus = synth_generate(&SynthConfig { n_days, ..SynthConfig::default() }).unwrap();
    corpus.write(dir).unwrap();
    let mut cfg = PipelineConfig::load(&dir.join("pipeline.toml")).unwrap();
    cfg.threshold.taus = vec![7, 14];
    cfg.threshold.margins = vec![0.2, 0.6, 1.0];
    cfg.threshold.breakdown_tau = 7;
    cfg.forecast.models = vec![ModelKind::Martingale, ModelKind::Gp];
    cfg.forecast.horizons = vec![7];
    cfg.forecast.gp.restarts = 1;
    cfg.forecast.gp.max_iters = 60;
    cfg.stats.samples = 200;
    cfg
}

fn snapshot(out: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn end_to_end_then_cached_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light(dir.path(), 240);
    let first = run_pipeline(cfg.clone()).unwrap();
    for f in [
        "clusters_SYN.csv",
        "features_SYN.csv",
        "table1_threshold_horizons.csv",
        "table2_threshold_margins_tau7.csv",
        "table3_importance_m0.6.csv",
        "table4_forecast_ablation.csv",
        "table5_forecast_horizons.csv",
        "predictions.csv",
        "runs.jsonl",
    ] {
        let path = cfg.out_dir.join(f);
        assert!(first.outputs.contains(&path), "{f} not reported");
        assert!(std::fs::metadata(&path).unwrap().len() > 0, "{f} empty");
    }
    let table1 = std::fs::read_to_string(cfg.out_dir.join("table1_threshold_horizons.csv")).unwrap();
    assert!(table1.contains(&first.config_hash));
    let before = snapshot(&cfg.out_dir);

    let second = run_pipeline(cfg.clone()).unwrap();
    assert!(!second.cache.is_empty());
    assert!(second.cache.iter().all(|e| e.hit), "{:?}", second.cache.iter().find(|e| !e.hit));
    assert_eq!(second.config_hash, first.config_hash);
    assert_eq!(snapshot(&cfg.out_dir), before);
}

#[test]
fn stop_after_ingest_writes_only_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light(dir.path(), 90);
    let s = Pipeline::new(cfg.clone()).run_until(StopAfter::Ingest).unwrap();
    let names: Vec<String> = s.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec!["ingest_SYN.csv"]);
}

#[test]
fn corrupted_embeddings_fail_in_ingest_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light(dir.path(), 90);
    let path = dir.path().join("embeddings.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[2][..lines[2].len() / 2];
    lines[2] = cut;
    std::fs::write(&path, lines.join("\n")).unwrap();
    let err = run_pipeline(cfg).unwrap_err().to_string();
    assert!(err.contains("ingest"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn grid_has_26_rows_per_tau() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = light(dir.path(), 120);
    cfg.grid.taus = vec![7];
    cfg.grid.margins = vec![0.6];
    let s = appendix_grid(cfg.clone()).unwrap();
    assert!(s.outputs.contains(&cfg.out_dir.join("grid.csv")));
    let mut rdr = csv::Reader::from_path(cfg.out_dir.join("grid.csv")).unwrap();
    assert_eq!(rdr.records().count(), 26);
    let mut rdr = csv::Reader::from_path(cfg.out_dir.join("silhouette.csv")).unwrap();
    assert_eq!(rdr.records().count(), 24);
}
