//! Plan validation, result-table serialization, and protocol runner guards.

use std::path::PathBuf;

use metafault::harness::{
    run_artificial_to_real, stats, ExperimentPlan, HarnessError, ResultRow, ResultTable,
    SCHEMA_VERSION,
};
use metafault::meta::MetaConfig;

fn plan() -> ExperimentPlan {
    ExperimentPlan {
        schema_version: SCHEMA_VERSION,
        manifest: PathBuf::from("/nonexistent/manifest.json"),
        meta_train_classes: vec![1, 2, 3],
        meta_test_classes: vec![4, 5],
        train_samples_per_class: 4,
        n_way: 2,
        k_shot: 1,
        query_per_class: 1,
        cfg: MetaConfig::default(),
        trials: 1,
        test_episodes: 2,
        max_runtime_secs: 3600,
    }
}

#[test]
fn plan_validation_guards() {
    plan().validate().unwrap();

    let mut p = plan();
    p.schema_version = 2;
    assert!(matches!(p.validate(), Err(HarnessError::Plan(_))));

    let mut p = plan();
    p.meta_test_classes = vec![3, 4];
    let err = p.validate().unwrap_err();
    assert!(err.to_string().contains("disjoint"), "got {err}");

    let mut p = plan();
    p.trials = 0;
    assert!(p.validate().is_err());

    let mut p = plan();
    p.k_shot = 0;
    assert!(p.validate().is_err());
}

#[test]
fn plan_json_rejects_unknown_fields_and_fills_defaults() {
    let minimal = serde_json::json!({
        "schema_version": 1,
        "manifest": "corpus/manifest.json",
        "meta_train_classes": [1, 2, 3],
        "meta_test_classes": [4],
        "train_samples_per_class": 9,
        "n_way": 2,
        "k_shot": 5
    });
    let p: ExperimentPlan = serde_json::from_value(minimal.clone()).unwrap();
    assert_eq!(p.query_per_class, 5);
    assert_eq!(p.trials, 5);
    assert_eq!(p.test_episodes, 10);
    assert_eq!(p.cfg, MetaConfig::default());

    let mut drifted = minimal;
    drifted["iterations"] = serde_json::json!(10); // belongs inside cfg
    assert!(serde_json::from_value::<ExperimentPlan>(drifted).is_err());
}

#[test]
fn stats_use_sample_std() {
    let (mean, std) = stats(&[0.8, 0.9, 1.0]);
    assert!((mean - 0.9).abs() < 1e-12);
    assert!((std - 0.1).abs() < 1e-12); // (n-1) denominator
    assert_eq!(stats(&[0.5]), (0.5, 0.0));
}

#[test]
fn csv_has_the_contract_header_and_recomputes() {
    let table = ResultTable {
        rows: vec![ResultRow {
            setting: "demo".into(),
            mean_acc: 0.925,
            std: 0.0125,
            trials: 5,
            seconds: 12.5,
        }],
    };
    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("setting,mean_acc,std,trials,seconds"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[0], "demo");
    assert!((fields[1].parse::<f64>().unwrap() - 0.925).abs() < 1e-6);
    assert!((fields[2].parse::<f64>().unwrap() - 0.0125).abs() < 1e-6);
    assert_eq!(fields[3], "5");

    let text = table.to_text();
    assert!(text.starts_with("setting"));
    assert!(text.contains("demo"));
}

#[test]
fn a2r_rejects_overlapping_domains() {
    let err = run_artificial_to_real(&plan(), &[1, 2], &[2, 3], &[1, 5], None, 1).unwrap_err();
    assert!(err.to_string().contains("disjoint"), "got {err}");

    let err = run_artificial_to_real(&plan(), &[1], &[2], &[], None, 1).unwrap_err();
    assert!(matches!(err, HarnessError::Plan(_)));
}
