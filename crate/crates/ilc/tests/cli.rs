use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ilc::pipeline::{Evaluation, Instance, Layout};
use ilc::store::read_store;
use serde_json::Value;

const TINY: &str = r#"{
    "name": "tiny",
    "num_seeds": 2,
    "dataset": {"kind": "conditional", "n_train": 300, "n_test": 200},
    "backbone": {"depth": 4, "width": 12, "epochs": 3},
    "probe_epochs": 4,
    "analysis": {"pca_dim": 4}
}"#;

fn ilc(args: &[&str], cache: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ilc"));
    cmd.args(args);
    match cache {
        Some(c) => cmd.env("ILC_CACHE_DIR", c),
        None => cmd.env_remove("ILC_CACHE_DIR"),
    };
    cmd.output().expect("spawn ilc")
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: PathBuf,
    out: PathBuf,
}

fn setup() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    Run { cfg, out, _dir: dir }
}

impl Run {
    fn cmd(&self, stage: &str, extra: &[&str]) -> Output {
        let mut args = vec![stage, "--config", self.cfg.to_str().unwrap(), "--out", self.out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ilc(&args, None)
    }

    fn bytes(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

#[test]
fn generate_records_params_and_is_deterministic() {
    let r = setup();
    let manifest = ok(r.cmd("generate", &[]));
    assert_eq!(manifest["params"]["corr"], 0.9);
    assert_eq!(manifest["files"].as_object().unwrap().len(), 4);
    let first = r.bytes("data/seed-0/id.ilcf");
    ok(r.cmd("generate", &[]));
    assert_eq!(first, r.bytes("data/seed-0/id.ilcf"));
    assert_eq!(read_store(&r.out.join("data/seed-1/ood.ilcf")).unwrap().manifest.num_samples, 200);
}

#[test]
fn invalid_config_exits_with_2_and_a_field_path() {
    let r = setup();
    let out = r.cmd("generate", &["--set", "dataset.corr=0.4"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["path"], "dataset.corr");
    assert_eq!(err["error"], "config");
}

#[test]
fn missing_upstream_artifact_exits_with_3() {
    let r = setup();
    let out = r.cmd("train-backbone", &[]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_artifact");
}

#[test]
fn stages_compose_into_a_full_report() {
    let r = setup();
    for stage in ["generate", "train-backbone", "extract"] {
        ok(r.cmd(stage, &["--jobs", "2"]));
    }
    let layout = Layout::new(&r.out);
    let zs = Instance::zero_shot();
    let st = read_store(&layout.features(&zs, 0, "probe")).unwrap();
    assert_eq!(st.manifest.layers, vec![1, 2, 3]);
    assert_eq!(st.manifest.layer_dims, vec![12, 12, 12]);
    assert_eq!(st.manifest.num_samples, 300);
    assert_eq!(read_store(&layout.features(&zs, 1, "valid")).unwrap().manifest.num_samples, 100);
    let extracted = r.bytes("features/zero-shot/seed-1/test.ilcf");
    ok(r.cmd("extract", &[]));
    assert_eq!(extracted, r.bytes("features/zero-shot/seed-1/test.ilcf"));

    for stage in ["probe", "evaluate", "analyze", "report"] {
        ok(r.cmd(stage, &["--jobs", "2"]));
    }
    let report: Value = serde_json::from_slice(&r.bytes("report/report.json")).unwrap();
    let selections = report["selections"].as_array().unwrap();
    assert_eq!(selections.len(), 1);
    let l_star = selections[0]["l_star"].as_u64().unwrap();
    assert!((1..=2).contains(&l_star));
    let eval: Evaluation = serde_json::from_slice(&r.bytes("tables/evaluation-zero-shot.json")).unwrap();
    let inst = eval.instance(None).unwrap();
    for m in ["base", "last_layer", "best_layer"] {
        assert_eq!(inst.method(m).unwrap().per_seed.len(), 2, "{m}");
    }

    let hash = report["config_hash"].as_str().unwrap().to_string();
    for table in ["report/results.csv", "report/analysis.csv", "report/sweep.csv"] {
        let text = String::from_utf8(r.bytes(table)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let (h, s) = (
            header.iter().position(|c| *c == "config_hash").unwrap(),
            header.iter().position(|c| *c == "seed").unwrap(),
        );
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[h], hash, "{table}");
            assert!(cells[s] == "0" || cells[s] == "1", "{table}: {line}");
        }
    }

    let tables: Vec<Vec<u8>> = ["report/results.csv", "report/analysis.csv", "report/summary.csv"].iter().map(|t| r.bytes(t)).collect();
    ok(r.cmd("report", &[]));
    let again: Vec<Vec<u8>> = ["report/results.csv", "report/analysis.csv", "report/summary.csv"].iter().map(|t| r.bytes(t)).collect();
    assert_eq!(tables, again);
}

#[test]
fn few_shot_sweep_reports_every_pi() {
    let r = setup();
    ok(r.cmd("run", &["--scenario", "few-shot", "--pi", "0.2,1.0", "--max-layer", "2"]));
    let eval: Evaluation = serde_json::from_slice(&r.bytes("tables/evaluation-few-shot.json")).unwrap();
    assert_eq!(eval.instances.len(), 2);
    for inst in &eval.instances {
        assert!(inst.l_star <= 2);
        assert!(inst.method("best_layer").is_some() && inst.method("last_layer").is_some());
    }
    let report: Value = serde_json::from_slice(&r.bytes("report/report.json")).unwrap();
    assert_eq!(report["selections"].as_array().unwrap().len(), 2);
    assert!(r.out.join("probes/few-shot/pi-0.2/seed-0.ilcp").is_file());
}

#[test]
fn cached_stages_reproduce_artifacts() {
    let r = setup();
    let cache = r._dir.path().join("cache");
    let other = r._dir.path().join("other");
    let args = |out: &Path| -> Vec<String> {
        vec!["--config".into(), r.cfg.display().to_string(), "--out".into(), out.display().to_string()]
    };
    for out in [&r.out, &other] {
        let a = args(out);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        for stage in ["generate", "train-backbone"] {
            let mut v = vec![stage];
            v.extend(&a);
            let res = ok(ilc(&v, Some(&cache)));
            if stage == "train-backbone" {
                let hit = res[0]["cached"].as_bool().unwrap();
                assert_eq!(hit, out == &other);
            }
        }
    }
    assert_eq!(r.bytes("backbones/seed-0.ilcb"), std::fs::read(other.join("backbones/seed-0.ilcb")).unwrap());
}
