use std::fs;
use std::path::PathBuf;

use lvggm::harness::{
    experiment_command, ingest_csv, write_matrix_csv, write_samples_csv, ExperimentConfig, GammaSetting, IngestMode,
};
use lvggm::lvmodel::{build_cycle_model, marginalize};
use lvggm::matrix::mvn_sample;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/fig1a.json")
}

#[test]
fn committed_fixture_is_valid() {
    let cfg = ExperimentConfig::load(&fixture()).unwrap();
    assert_eq!(cfg.trials_per_n, 50);
    assert_eq!(cfg.gamma, GammaSetting::Fixed(0.35));
    assert!(cfg.n_grid.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn files_roundtrip_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let d = marginalize(&build_cycle_model(12, 2, 0.25, 0.8, None, 5).unwrap()).unwrap();
    let cov = dir.path().join("cov.csv");
    write_matrix_csv(&cov, &d.sigma_marg, None).unwrap();
    let ing = ingest_csv(&cov, IngestMode::Covariance, Some(100)).unwrap();
    assert!(ing.covariance.sigma_n.sub(&d.sigma_marg).max_abs() <= 1e-12);

    let x = mvn_sample(&d.sigma_marg, 300, 8).unwrap();
    let samples = dir.path().join("x.csv");
    write_samples_csv(&samples, &x).unwrap();
    let ing = ingest_csv(&samples, IngestMode::Samples, None).unwrap();
    assert_eq!((ing.covariance.p, ing.covariance.n), (12, 300));
    assert!(ing.warnings.is_empty());
}

#[test]
fn experiment_outputs_are_byte_identical_apart_from_timestamp() {
    let mut cfg = ExperimentConfig::load(&fixture()).unwrap();
    cfg.n_grid = vec![20_000, 40_000];
    cfg.trials_per_n = 3;
    let dir = tempfile::tempdir().unwrap();
    let strip = |path: PathBuf| {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("\"generated_at\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (a, files) = experiment_command(&cfg, &dir.path().join("a")).unwrap();
    let (_, _) = experiment_command(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(files.len(), 2);
    for name in ["fig1a_curve.csv", "fig1a_summary.json"] {
        assert_eq!(strip(dir.path().join("a").join(name)), strip(dir.path().join("b").join(name)));
    }
    assert_eq!(a.true_rank, 2);
    assert_eq!(a.curve.rows.len(), 2);
    assert!(a.curve.rows.iter().all(|r| (0.0..=1.0).contains(&r.p_success) && r.trials == 3));
}
