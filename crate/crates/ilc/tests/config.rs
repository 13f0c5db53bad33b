use ilc::config::{load, resolve, set_path, DatasetConfig, ExperimentConfig, ScenarioName};
use ilc::Error;

fn config_path(err: &Error) -> &str {
    match err {
        Error::Config { path, .. } => path,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn defaults_describe_the_colored_digit_experiment() {
    let cfg = resolve(None, &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.seeds(), vec![0, 1, 2]);
    let DatasetConfig::Conditional(p) = &cfg.dataset else { panic!("default dataset is conditional") };
    assert_eq!(p.corr, 0.9);
    assert_eq!(cfg.grid_for(ScenarioName::ZeroShot).len(), 9);
    assert_eq!(cfg.grid_for(ScenarioName::FewShot).len(), 12);
    assert_eq!(cfg.probe_epochs, 100);
    assert_eq!(cfg.analysis.tvd_bins, 40);
}

#[test]
fn invalid_corr_points_at_the_field() {
    let err = resolve(None, &["dataset.corr=0.4".into()]).unwrap_err();
    assert_eq!(config_path(&err), "dataset.corr");
    assert_eq!(err.exit_code(), 2);
    assert_eq!(err.to_json()["path"], "dataset.corr");
}

#[test]
fn type_errors_carry_their_path() {
    let err = resolve(None, &["backbone.depth=\"deep\"".into()]).unwrap_err();
    assert_eq!(config_path(&err), "backbone.depth");
    let err = resolve(Some(r#"{"backbone": {"widht": 3}}"#), &[]).unwrap_err();
    assert!(config_path(&err).starts_with("backbone"), "{err}");
}

#[test]
fn overrides_switch_dataset_and_scenario() {
    let cfg = resolve(
        None,
        &[
            r#"dataset={"kind": "subpopulation"}"#.into(),
            "scenario=few-shot".into(),
            "pis=[0.05, 1.0]".into(),
            "seed=10".into(),
        ],
    )
    .unwrap();
    assert!(matches!(cfg.dataset, DatasetConfig::Subpopulation(_)));
    assert_eq!(cfg.scenario, ScenarioName::FewShot);
    assert_eq!(cfg.pis, vec![0.05, 1.0]);
    assert_eq!(cfg.seeds(), vec![10, 11, 12]);
}

#[test]
fn hash_ignores_out_dir_only() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.probe_epochs = 99;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn set_path_creates_nested_objects() {
    let mut v = serde_json::json!({});
    set_path(&mut v, "a.b.c", "3").unwrap();
    set_path(&mut v, "a.name", "plain text").unwrap();
    assert_eq!(v, serde_json::json!({ "a": { "b": { "c": 3 }, "name": "plain text" } }));
    assert!(set_path(&mut v, "a..b", "1").is_err());
}

#[test]
fn missing_config_file_is_a_config_error() {
    let err = load(Some(std::path::Path::new("/nonexistent/cfg.json")), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
