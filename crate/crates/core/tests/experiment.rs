use std::fs;

use clinfed::experiment::{
    accountant_query, read_results, read_trajectory, run_and_emit, Condition, ExperimentConfig,
    RESULTS_FILE, SUMMARY_FILE, TRAJECTORY_FILE,
};
use clinfed::metrics::significant;
use clinfed::Error;

fn config(condition: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        "condition = \"{condition}\"\nseed = 3\nsites = 2\nadmissions = 500\nwidth = 10\n\
         min_train = 100\nmodels = [\"logistic\", \"mlp\"]\nhidden_sizes = [4]\nlrs = [0.01, 0.1]\n\
         batch_sizes = [64]\nepochs = 3\nrounds = 3\n{extra}"
    ))
    .unwrap()
}

#[test]
fn every_condition_emits_consistent_reports() {
    let cases = [
        ("local", ""),
        ("central", ""),
        ("federated", ""),
        ("central_dp", "noise_multipliers = [1.0]\nclip_norms = [1.0, 10.0]\ndp_epochs = 3"),
        ("federated_dp", "clip_norms = [0.1, 1.0]\ndp_select_epochs = 2"),
    ];
    for (condition, extra) in cases {
        let cfg = config(condition, extra);
        let dir = tempfile::tempdir().unwrap();
        let (out, _) = run_and_emit(&cfg, dir.path()).unwrap();
        let rows = read_results(dir.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(rows.len(), 4, "{condition}");
        for r in &rows {
            assert_eq!(r.condition, condition);
            assert!(r.ci_low <= r.auc && r.auc <= r.ci_high);
            match cfg.condition {
                Condition::Local => assert!(r.rel_auc.is_none()),
                _ => {
                    let (lo, hi) = (r.rel_ci_low.unwrap(), r.rel_ci_high.unwrap());
                    assert_eq!(r.significant, Some(significant(lo, hi)));
                }
            }
            if cfg.condition.is_dp() {
                let steps = r.steps.unwrap();
                let eps = accountant_query(r.sampling_ratio.unwrap(), r.noise_multiplier.unwrap(), steps, r.delta.unwrap())
                    .unwrap()
                    .epsilon;
                assert_eq!(r.epsilon, Some(eps));
            } else {
                assert!(r.epsilon.is_none());
            }
        }
        let traj = read_trajectory(dir.path().join(TRAJECTORY_FILE)).unwrap();
        assert_eq!(traj.len(), out.trajectory.len());
        if condition == "federated_dp" {
            assert_eq!(traj.len(), 2 * 2 * 3);
        }
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.contains(condition));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = config("federated", "");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_and_emit(&cfg, a.path()).unwrap();
    run_and_emit(&cfg, b.path()).unwrap();
    for f in [RESULTS_FILE, TRAJECTORY_FILE, SUMMARY_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn csv_source_matches_generated_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("local", "");
    let cohorts = clinfed::data::generate_synthetic(&cfg.synthetic_spec()).unwrap();
    let csv = dir.path().join("cohort.csv");
    clinfed::data::write_csv(&csv, &cohorts).unwrap();
    let from_csv = ExperimentConfig::from_toml_str(&format!(
        "condition = \"local\"\nseed = 3\nwidth = 10\nmin_train = 100\nmodels = [\"logistic\", \"mlp\"]\n\
         hidden_sizes = [4]\nlrs = [0.01, 0.1]\nbatch_sizes = [64]\nepochs = 3\ncsv = {:?}",
        csv.display().to_string()
    ))
    .unwrap();
    let a = clinfed::experiment::run_condition(&cfg).unwrap();
    let b = clinfed::experiment::run_condition(&from_csv).unwrap();
    assert_eq!(a.rows, b.rows);
}

#[test]
fn config_errors_are_named() {
    let err = ExperimentConfig::from_toml_str("condition = \"central\"\nnoise_multipliers = [1.0]").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("noise_multipliers")), "{err}");
    let err = ExperimentConfig::from_toml_str("condition = \"bogus\"").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "condition = \"local\"\nrounds = 0\n").unwrap();
    let err = ExperimentConfig::from_path(&path).unwrap_err();
    assert!(err.to_string().contains("c.toml"), "{err}");
    assert!(ExperimentConfig::from_path(dir.path().join("missing.toml")).is_err());
}

#[test]
fn accountant_query_examples() {
    assert!((accountant_query(1.0, 1.0, 1, 1e-5).unwrap().epsilon - 5.302585).abs() < 1e-5);
    let zero = accountant_query(0.3, 2.0, 0, 1e-5).unwrap();
    assert!((zero.epsilon - (1e5f64).ln() / 63.0).abs() < 1e-12);
    let mut last = 0.0;
    for t in [1u64, 2, 4, 8, 16, 32, 64] {
        let e = accountant_query(0.05, 1.0, t, 1e-5).unwrap().epsilon;
        assert!(e >= last);
        last = e;
    }
    assert!(accountant_query(0.05, -1.0, 1, 1e-5).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = Vec::new();
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let c = ExperimentConfig::from_path(&path).unwrap();
        assert_eq!(path.file_stem().unwrap(), c.condition.name(), "{}", path.display());
        seen.push(c.condition);
    }
    seen.sort();
    assert_eq!(
        seen,
        [Condition::Local, Condition::Central, Condition::CentralDp, Condition::Federated, Condition::FederatedDp]
    );
}
