//! The staged experiment. Every stage reads its inputs from the output
//! directory and writes its products back, so the stages can also run as
//! separate commands.
//!
//! ```text
//! <out>/config.json
//! <out>/data/manifest.json
//! <out>/data/seed-<s>/{id,ood}.ilcf              raw inputs as layer 0
//! <out>/backbones/seed-<s>.{ilcb,json}
//! <out>/features/<instance>/seed-<s>/{probe,valid,test}.ilcf
//! <out>/probes/<instance>/seed-<s>.ilcp
//! <out>/tables/{sweep,results}-<scenario>.csv
//! <out>/tables/evaluation-<scenario>.json
//! <out>/tables/{analysis.csv,plot_data.json}
//! <out>/report/...
//! <out>/timings/<stage>.json
//! ```
//!
//! `<instance>` is `zero-shot` or `few-shot/pi-<π>`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ilc_core::analysis::{collapse_profile, fit_pca, project, sensitivity_profile, tvd_profile, CollapseProfile, SensitivityProfile, TvdProfile};
use ilc_core::backbone::{build_backbone, mlp_spec, train_backbone, BackboneTrainConfig};
use ilc_core::data::{gen_conditional_shift, gen_input_noise_pair, gen_subpopulation_shift, make_splits, LabeledDataset, Sample, ShiftKind};
use ilc_core::eval::Metric;
use ilc_core::features::FeatureSet;
use ilc_core::probe::{best_config, score_ilc, train_ilcs, Ilc, JobRunner, LayerChoice, ProbeKey, ProbeSet, ValidSets};
use ilc_core::protocol::{audit_probe_split, evaluate_few_shot, evaluate_zero_shot, MethodResult, SeedRun, Summary};
use ilc_core::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{load_backbone, load_probes, save_backbone, save_probes, sha256_hex};
use crate::config::{DatasetConfig, ExperimentConfig, ScenarioName};
use crate::error::{Error, Result};
use crate::runner::Pool;
use crate::store::{read_feature_set, read_store, write_feature_set};
use crate::tables::{num, opt_num, Table};

pub const CACHE_ENV: &str = "ILC_CACHE_DIR";
pub const STAGES: [&str; 7] = ["generate", "train-backbone", "extract", "probe", "evaluate", "analyze", "report"];

const SWEEP_COLUMNS: [&str; 10] = ["layer", "eta", "lambda", "seed", "split", "metric", "value", "scenario", "pi", "config_hash"];
const RESULT_COLUMNS: [&str; 10] = ["protocol", "dataset", "shift_kind", "pi", "method", "layer", "seed", "metric", "value", "config_hash"];
const ANALYSIS_COLUMNS: [&str; 6] = ["layer", "group", "metric", "value", "seed", "config_hash"];
const SUMMARY_COLUMNS: [&str; 10] = ["protocol", "pi", "method", "layer", "metric", "mean", "std", "n", "l_star", "config_hash"];
const MAX_PLOT_POINTS: usize = 500;

/// One probing setup: zero-shot, or few-shot at one π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub scenario: ScenarioName,
    pub pi: Option<f64>,
}

impl Instance {
    pub fn zero_shot() -> Self {
        Self {
            scenario: ScenarioName::ZeroShot,
            pi: None,
        }
    }

    pub fn few_shot(pi: f64) -> Self {
        Self {
            scenario: ScenarioName::FewShot,
            pi: Some(pi),
        }
    }

    pub fn dir(&self) -> String {
        match self.pi {
            None => self.scenario.as_str().to_string(),
            Some(p) => format!("{}/pi-{p}", self.scenario.as_str()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset(&self, seed: u64, dist: &str) -> PathBuf {
        self.root.join("data").join(format!("seed-{seed}")).join(format!("{dist}.ilcf"))
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn backbone(&self, seed: u64) -> PathBuf {
        self.root.join("backbones").join(format!("seed-{seed}.ilcb"))
    }

    pub fn backbone_report(&self, seed: u64) -> PathBuf {
        self.root.join("backbones").join(format!("seed-{seed}.json"))
    }

    pub fn features(&self, inst: &Instance, seed: u64, split: &str) -> PathBuf {
        self.root
            .join("features")
            .join(inst.dir())
            .join(format!("seed-{seed}"))
            .join(format!("{split}.ilcf"))
    }

    pub fn probes(&self, inst: &Instance, seed: u64) -> PathBuf {
        self.root.join("probes").join(inst.dir()).join(format!("seed-{seed}.ilcp"))
    }

    pub fn sweep(&self, s: ScenarioName) -> PathBuf {
        self.root.join("tables").join(format!("sweep-{}.csv", s.as_str()))
    }

    pub fn results(&self, s: ScenarioName) -> PathBuf {
        self.root.join("tables").join(format!("results-{}.csv", s.as_str()))
    }

    pub fn evaluation(&self, s: ScenarioName) -> PathBuf {
        self.root.join("tables").join(format!("evaluation-{}.json", s.as_str()))
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("tables/analysis.csv")
    }

    pub fn plot_data(&self) -> PathBuf {
        self.root.join("tables/plot_data.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn timing(&self, stage: &str) -> PathBuf {
        self.root.join("timings").join(format!("{stage}.json"))
    }
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Accuracy => "accuracy",
        Metric::WorstGroupAccuracy => "worst_group_accuracy",
    }
}

fn shift_name(k: ShiftKind) -> &'static str {
    match k {
        ShiftKind::Conditional => "conditional",
        ShiftKind::Subpopulation => "subpopulation",
        ShiftKind::InputNoise => "input_noise",
    }
}

pub fn generate_pair(d: &DatasetConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok(match d {
        DatasetConfig::Conditional(p) => gen_conditional_shift(p, seed)?,
        DatasetConfig::Subpopulation(p) => gen_subpopulation_shift(p, seed)?,
        DatasetConfig::InputNoise(c) => gen_input_noise_pair(&c.base, c.noise, c.severity, seed)?,
    })
}

/// Reads a dataset store written by the generate stage; also returns the
/// store checksum.
pub fn load_dataset(path: &Path) -> Result<(LabeledDataset, u32)> {
    let mut st = read_store(path)?;
    let prov = st.manifest.provenance.clone();
    let crc = st.checksum;
    let fs = st.feature_set(Some(&[0]))?;
    let x = fs.layer(0)?;
    let samples = (0..fs.len())
        .map(|i| Sample {
            id: fs.sample_ids[i],
            x: x.row(i).to_vec(),
            y: fs.labels[i],
            g: fs.groups[i],
            tag: fs.tags[i],
        })
        .collect();
    let shift_kind = serde_json::from_value(prov["shift_kind"].clone()).map_err(|e| Error::Format(format!("shift_kind: {e}")))?;
    let seed = prov["seed"].as_u64().ok_or_else(|| Error::Format("dataset store has no seed".into()))?;
    Ok((
        LabeledDataset {
            samples,
            input_dim: x.cols(),
            num_classes: fs.num_classes,
            num_groups: fs.num_groups,
            seed,
            shift_kind,
        },
        crc,
    ))
}

/// Raw input rows of `ds` in the order of `ids`.
pub fn rows_by_id(ds: &LabeledDataset, ids: &[u64]) -> Result<Matrix<f32>> {
    let index: HashMap<u64, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut data = Vec::with_capacity(ids.len() * ds.input_dim);
    for id in ids {
        let &i = index
            .get(id)
            .ok_or_else(|| Error::Format(format!("sample {id} is not in the dataset store")))?;
        data.extend_from_slice(&ds.samples[i].x);
    }
    Ok(Matrix::from_vec(ids.len(), ds.input_dim, data)?)
}

fn cache_key(stage: &str, inputs: &Value) -> String {
    let bytes = serde_json::to_vec(&json!({ "stage": stage, "inputs": inputs })).expect("json");
    sha256_hex(&bytes)
}

/// Produces `dest` through the artifact cache when one is configured.
/// Returns whether the artifact came from the cache.
fn cached(key: &str, dest: &Path, compute: impl FnOnce() -> Result<()>) -> Result<bool> {
    let dir = match std::env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => {
            compute()?;
            return Ok(false);
        }
    };
    let entry = dir.join(key);
    if entry.is_file() {
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&entry, dest).map_err(|e| Error::io(&entry, e))?;
        return Ok(true);
    }
    compute()?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tmp = dir.join(format!("{key}.{}.tmp", std::process::id()));
    std::fs::copy(dest, &tmp).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &entry).map_err(|e| Error::io(&entry, e))?;
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: String,
    pub layer: usize,
    pub per_seed: BTreeMap<u64, f64>,
    pub summary: Summary,
}

impl MethodEval {
    fn from_result(r: &MethodResult) -> Self {
        Self {
            method: r.method.to_string(),
            layer: r.layer,
            per_seed: r.per_seed.iter().map(|(&s, e)| (s, e.value)).collect(),
            summary: r.summary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub layer: usize,
    pub eta: f64,
    pub lambda: f64,
    pub mean_valid: f64,
    /// Test score of the layer's selected configuration, per seed.
    pub test: BTreeMap<u64, f64>,
    /// Accuracy of the same probes on their own ID training split
    /// (zero-shot only).
    pub id_accuracy: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub scenario: ScenarioName,
    pub pi: Option<f64>,
    pub metric: Metric,
    pub l_star: usize,
    pub eta: f64,
    pub lambda: f64,
    pub valid_score: f64,
    pub methods: Vec<MethodEval>,
    pub layers: Vec<LayerEval>,
}

impl InstanceEval {
    pub fn method(&self, name: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn layer(&self, l: usize) -> Option<&LayerEval> {
        self.layers.iter().find(|e| e.layer == l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub dataset: String,
    pub shift_kind: String,
    pub depth: usize,
    pub instances: Vec<InstanceEval>,
}

impl Evaluation {
    pub fn instance(&self, pi: Option<f64>) -> Option<&InstanceEval> {
        self.instances.iter().find(|i| i.pi == pi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub seed: u64,
    pub sensitivity: SensitivityProfile,
    pub tvd: TvdProfile,
    pub collapse: CollapseProfile,
    pub pca_explained: BTreeMap<usize, f64>,
    /// Test score of the layer's validation-best ILC on PCA features.
    pub pca_ilc: BTreeMap<usize, f64>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pool: Pool,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            layout: Layout::new(&cfg.out_dir),
            hash: cfg.hash(),
            cfg,
            pool: Pool::new(jobs),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.cfg.seeds()
    }

    /// Instances probed for the configured scenario.
    pub fn instances(&self) -> Vec<Instance> {
        match self.cfg.scenario {
            ScenarioName::ZeroShot => vec![Instance::zero_shot()],
            ScenarioName::FewShot => self.cfg.pis.iter().map(|&p| Instance::few_shot(p)).collect(),
        }
    }

    /// Feature instances to extract; zero-shot is always included because
    /// the analysis runs on it.
    fn feature_instances(&self) -> Vec<Instance> {
        let mut v = vec![Instance::zero_shot()];
        if self.cfg.scenario == ScenarioName::FewShot {
            v.extend(self.instances());
        }
        v
    }

    fn depth(&self) -> usize {
        self.cfg.backbone.depth
    }

    fn probe_layers(&self) -> Vec<usize> {
        (1..self.depth()).collect()
    }

    fn stage<T>(&self, name: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        write_json(&self.layout.config(), &self.cfg)?;
        let out = f(self)?;
        let timing = json!({
            "stage": name,
            "seconds": start.elapsed().as_secs_f64(),
            "threads": self.pool.threads(),
            "config_hash": self.hash,
        });
        write_json(&self.layout.timing(name), &timing)?;
        Ok(out)
    }

    pub fn run_stage(&self, name: &str) -> Result<Value> {
        match name {
            "generate" => self.generate(),
            "train-backbone" => self.train_backbones(),
            "extract" => self.extract(),
            "probe" => self.probe().map(|t| json!({ "rows": t.rows.len() })),
            "evaluate" => self.evaluate().map(|e| serde_json::to_value(e).expect("json")),
            "analyze" => self.analyze().map(|a| json!({ "seeds": a.len() })),
            "report" => self.report(),
            other => Err(Error::config("stage", format!("unknown stage {other}"))),
        }
    }

    /// Runs every stage in order and returns the report.
    pub fn run_all(&self) -> Result<Value> {
        for s in &STAGES[..STAGES.len() - 1] {
            self.run_stage(s)?;
        }
        self.report()
    }

    pub fn generate(&self) -> Result<Value> {
        self.stage("generate", Self::do_generate)
    }

    pub fn train_backbones(&self) -> Result<Value> {
        self.stage("train-backbone", Self::do_train_backbones)
    }

    pub fn extract(&self) -> Result<Value> {
        self.stage("extract", Self::do_extract)
    }

    pub fn probe(&self) -> Result<Table> {
        self.stage("probe", Self::do_probe)
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        self.stage("evaluate", Self::do_evaluate)
    }

    pub fn analyze(&self) -> Result<Vec<SeedAnalysis>> {
        self.stage("analyze", Self::do_analyze)
    }

    pub fn report(&self) -> Result<Value> {
        self.stage("report", Self::do_report)
    }

    fn do_generate(&self) -> Result<Value> {
        let seeds = self.seeds();
        let d = &self.cfg.dataset;
        let per_seed = self.pool.run(&seeds, |&s| -> Result<Vec<(String, Value)>> {
            let (id, ood) = generate_pair(d, s)?;
            let mut files = Vec::new();
            for (dist, ds) in [("id", &id), ("ood", &ood)] {
                let path = self.layout.dataset(s, dist);
                let prov = json!({
                    "generator": d.name(),
                    "params": d,
                    "seed": s,
                    "shift_kind": ds.shift_kind,
                    "dist": dist,
                });
                let crc = write_feature_set(&path, &FeatureSet::raw(dist, ds), prov)?;
                files.push((
                    format!("seed-{s}/{dist}.ilcf"),
                    json!({
                        "crc32": format!("{crc:08x}"),
                        "num_samples": ds.len(),
                        "group_counts": ds.group_counts(),
                    }),
                ));
            }
            Ok(files)
        });
        let mut files = serde_json::Map::new();
        for r in per_seed {
            files.extend(r?);
        }
        let manifest = json!({
            "config_hash": self.hash,
            "generator": d.name(),
            "shift_kind": shift_name(d.shift_kind()),
            "params": d,
            "seeds": seeds,
            "files": files,
        });
        write_json(&self.layout.data_manifest(), &manifest)?;
        Ok(manifest)
    }

    fn do_train_backbones(&self) -> Result<Value> {
        let bc = &self.cfg.backbone;
        let seeds = self.seeds();
        let out = self.pool.run(&seeds, |&s| -> Result<Value> {
            let (ds, crc) = load_dataset(&self.layout.dataset(s, "id"))?;
            let tcfg = BackboneTrainConfig {
                epochs: bc.epochs,
                lr: bc.lr,
                batch_size: bc.batch_size,
                seed: s,
                adam: Default::default(),
            };
            let dest = self.layout.backbone(s);
            let key = cache_key("train-backbone", &json!({ "backbone": bc, "seed": s, "data": crc }));
            let hit = cached(&key, &dest, || {
                let spec = mlp_spec(ds.input_dim, bc.width, bc.depth, ds.num_classes, bc.residual);
                let init = build_backbone(&spec, s)?;
                let (mut b, report) = train_backbone(init, &ds.features(), &ds.labels(), ds.num_classes, &tcfg)?;
                b.freeze();
                save_backbone(&dest, &b, Some(&tcfg), Some(&report))?;
                Ok(())
            })?;
            let (_, header, sha) = load_backbone(&dest)?;
            let report = json!({
                "seed": s,
                "sha256": sha,
                "config_hash": self.hash,
                "train_config": header.train_config,
                "report": header.report,
            });
            write_json(&self.layout.backbone_report(s), &report)?;
            Ok(json!({ "seed": s, "sha256": sha, "cached": hit }))
        });
        Ok(Value::Array(out.into_iter().collect::<Result<_>>()?))
    }

    fn do_extract(&self) -> Result<Value> {
        let insts = self.feature_instances();
        let seeds = self.seeds();
        let out = self.pool.run(&seeds, |&s| -> Result<Value> {
            let (id, id_crc) = load_dataset(&self.layout.dataset(s, "id"))?;
            let (ood, ood_crc) = load_dataset(&self.layout.dataset(s, "ood"))?;
            let (b, _, sha) = load_backbone(&self.layout.backbone(s))?;
            let mut counts = serde_json::Map::new();
            for inst in &insts {
                let bundle = make_splits(&id, &ood, inst.scenario.scenario(), inst.pi, s)?;
                for (split, ds) in [("probe", &bundle.probe), ("valid", &bundle.valid), ("test", &bundle.test)] {
                    let fs = FeatureSet::extract(split, &b, ds)?;
                    let prov = json!({
                        "backbone_sha256": sha,
                        "seed": s,
                        "scenario": inst.scenario,
                        "pi": inst.pi,
                        "split": split,
                        "datasets": { "id": format!("{id_crc:08x}"), "ood": format!("{ood_crc:08x}") },
                    });
                    write_feature_set(&self.layout.features(inst, s, split), &fs, prov)?;
                    counts.insert(format!("{}/{split}", inst.dir()), fs.len().into());
                }
            }
            Ok(json!({ "seed": s, "samples": counts }))
        });
        Ok(Value::Array(out.into_iter().collect::<Result<_>>()?))
    }

    fn do_probe(&self) -> Result<Table> {
        let scn = self.cfg.scenario;
        let grid = self.cfg.grid_for(scn);
        let epochs = self.cfg.probe_epochs;
        let metric = self.cfg.metric();
        let layers = self.probe_layers();
        let mut sweep = Table::new(&SWEEP_COLUMNS);
        for inst in self.instances() {
            for s in self.seeds() {
                let mut st = read_store(&self.layout.features(&inst, s, "probe"))?;
                let crc = st.checksum;
                let probe = st.feature_set(Some(&layers))?;
                audit_probe_split(&probe, scn.scenario())?;
                let dest = self.layout.probes(&inst, s);
                let key = cache_key(
                    "probe",
                    &json!({ "grid": grid, "epochs": epochs, "seed": s, "features": crc, "layers": layers }),
                );
                cached(&key, &dest, || {
                    let ps = train_ilcs(&probe, &layers, &grid, epochs, &[s], &self.pool)?;
                    save_probes(&dest, &ps)?;
                    Ok(())
                })?;
                let ps = load_probes(&dest)?;
                let valid = read_feature_set(&self.layout.features(&inst, s, "valid"), Some(&layers))?;
                let test = read_feature_set(&self.layout.features(&inst, s, "test"), Some(&layers))?;
                for (&l, m) in &ps.probes {
                    for (key, ilc) in m {
                        for (split, fs) in [("valid", &valid), ("test", &test)] {
                            sweep.push(vec![
                                l.to_string(),
                                num(key.eta),
                                num(key.lambda),
                                key.seed.to_string(),
                                split.into(),
                                metric_name(metric).into(),
                                num(score_ilc(ilc, fs, metric)?),
                                scn.as_str().into(),
                                opt_num(inst.pi),
                                self.hash.clone(),
                            ]);
                        }
                    }
                }
            }
        }
        sweep.write(&self.layout.sweep(scn))?;
        Ok(sweep)
    }

    fn do_evaluate(&self) -> Result<Evaluation> {
        let scn = self.cfg.scenario;
        let metric = self.cfg.metric();
        let layers = self.probe_layers();
        let seeds = self.seeds();
        let mut backbones = Vec::with_capacity(seeds.len());
        let mut oods = Vec::with_capacity(seeds.len());
        for &s in &seeds {
            backbones.push(load_backbone(&self.layout.backbone(s))?.0);
            oods.push(load_dataset(&self.layout.dataset(s, "ood"))?.0);
        }
        let mut instances = Vec::new();
        for inst in self.instances() {
            let mut runs = Vec::with_capacity(seeds.len());
            let mut probes = ProbeSet::default();
            for (i, &s) in seeds.iter().enumerate() {
                let read = |split| read_feature_set(&self.layout.features(&inst, s, split), Some(&layers));
                let (probe, valid, test) = (read("probe")?, read("valid")?, read("test")?);
                audit_probe_split(&probe, scn.scenario())?;
                let test_inputs = rows_by_id(&oods[i], &test.sample_ids)?;
                runs.push(SeedRun {
                    seed: s,
                    backbone: &backbones[i],
                    probe,
                    valid,
                    test,
                    test_inputs,
                });
                probes.merge(load_probes(&self.layout.probes(&inst, s))?);
            }
            let layer_evals = layer_curves(&runs, &probes, &layers, metric, scn == ScenarioName::ZeroShot)?;
            let ev = match inst.pi {
                None => {
                    let r = evaluate_zero_shot(&runs, probes, metric, self.cfg.max_layer)?;
                    InstanceEval {
                        scenario: scn,
                        pi: None,
                        metric,
                        l_star: r.l_star,
                        eta: r.selection.hyper.eta,
                        lambda: r.selection.hyper.lambda,
                        valid_score: r.selection.score,
                        methods: [&r.base, &r.last, &r.best].into_iter().map(MethodEval::from_result).collect(),
                        layers: layer_evals,
                    }
                }
                Some(pi) => {
                    let r = evaluate_few_shot(pi, &runs, &probes, metric, self.cfg.max_layer)?;
                    InstanceEval {
                        scenario: scn,
                        pi: Some(pi),
                        metric,
                        l_star: r.l_star,
                        eta: r.selection.hyper.eta,
                        lambda: r.selection.hyper.lambda,
                        valid_score: r.selection.score,
                        methods: [&r.last_layer, &r.ilc_best].into_iter().map(MethodEval::from_result).collect(),
                        layers: layer_evals,
                    }
                }
            };
            instances.push(ev);
        }
        let eval = Evaluation {
            config_hash: self.hash.clone(),
            dataset: self.cfg.name.clone(),
            shift_kind: shift_name(self.cfg.dataset.shift_kind()).into(),
            depth: self.depth(),
            instances,
        };
        results_table(&eval).write(&self.layout.results(scn))?;
        write_json(&self.layout.evaluation(scn), &eval)?;
        Ok(eval)
    }

    fn do_analyze(&self) -> Result<Vec<SeedAnalysis>> {
        let zs = Instance::zero_shot();
        let layers = self.probe_layers();
        let ac = &self.cfg.analysis;
        let seeds = self.seeds();
        struct Part {
            analysis: SeedAnalysis,
            pca: [FeatureSet; 3],
            coords: Value,
        }
        let parts = self.pool.run(&seeds, |&s| -> Result<Part> {
            let read = |split| read_feature_set(&self.layout.features(&zs, s, split), Some(&layers));
            let (probe, valid, test) = (read("probe")?, read("valid")?, read("test")?);
            let sensitivity = sensitivity_profile(&probe, &test, &layers)?;
            let tvd = tvd_profile(&probe, &test, &layers, ac.tvd_bins, s)?;
            let collapse = collapse_profile(&probe, &layers, ac.nc1)?;
            let mut pca_explained = BTreeMap::new();
            let mut pca = [probe.clone(), valid.clone(), test.clone()];
            let mut coords = serde_json::Map::new();
            for &l in &layers {
                let m = probe.layer(l)?;
                let k = ac.pca_dim.min(m.cols()).min(m.rows());
                let p = fit_pca(l, m, k)?;
                let total = total_variance(m);
                let kept: f64 = p.explained_variance.iter().sum();
                pca_explained.insert(l, if total > 0.0 { kept / total } else { 0.0 });
                for (dst, src) in pca.iter_mut().zip([&probe, &valid, &test]) {
                    let proj = project(&p, src.layer(l)?)?;
                    dst.layers.insert(l, proj.map(|v| v as f32));
                }
                let t = pca[2].layer(l)?;
                let n = t.rows().min(MAX_PLOT_POINTS);
                let col = |c: usize| -> Vec<f32> { (0..n).map(|i| if c < t.cols() { t.get(i, c) } else { 0.0 }).collect() };
                coords.insert(
                    l.to_string(),
                    json!({ "x": col(0), "y": col(1), "label": &test.labels[..n], "group": &test.groups[..n] }),
                );
            }
            Ok(Part {
                analysis: SeedAnalysis {
                    seed: s,
                    sensitivity,
                    tvd,
                    collapse,
                    pca_explained,
                    pca_ilc: BTreeMap::new(),
                },
                pca,
                coords: Value::Object(coords),
            })
        });
        let mut parts: Vec<Part> = parts.into_iter().collect::<Result<_>>()?;

        // Zero-shot probing on the PCA coordinates, selected by mean
        // validation score over seeds like the original features.
        let grid = self.cfg.grid_for(ScenarioName::ZeroShot);
        let metric = self.cfg.metric();
        let mut ps = ProbeSet::default();
        for p in &parts {
            ps.merge(train_ilcs(&p.pca[0], &layers, &grid, self.cfg.probe_epochs, &[p.analysis.seed], &self.pool)?);
        }
        let valid = ValidSets::PerSeed(parts.iter().map(|p| (p.analysis.seed, &p.pca[1])).collect());
        let mut pca_scores: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); parts.len()];
        for &l in &layers {
            let choice = best_config(&ps, l, &valid, metric)?;
            for (i, p) in parts.iter().enumerate() {
                let ilc = selected(&ps, l, &choice, p.analysis.seed)?;
                pca_scores[i].insert(l, score_ilc(ilc, &p.pca[2], metric)?);
            }
        }
        for (p, sc) in parts.iter_mut().zip(pca_scores) {
            p.analysis.pca_ilc = sc;
        }

        let analyses: Vec<SeedAnalysis> = parts.iter().map(|p| p.analysis.clone()).collect();
        let table = analysis_table(&analyses, &self.hash);
        table.write(&self.layout.analysis())?;
        let plot = json!({
            "config_hash": self.hash,
            "layers": layers,
            "seeds": seeds,
            "mean_over_seeds": mean_series(&table, &layers),
            "distances": analyses.iter().map(|a| (a.seed.to_string(), &a.sensitivity.dists)).collect::<BTreeMap<_, _>>(),
            "pca_coords": { "seed": parts[0].analysis.seed, "split": "test", "layers": parts[0].coords },
        });
        write_json(&self.layout.plot_data(), &plot)?;
        Ok(analyses)
    }

    fn do_report(&self) -> Result<Value> {
        let dir = self.layout.report_dir();
        let mut evals = Vec::new();
        for scn in [ScenarioName::ZeroShot, ScenarioName::FewShot] {
            let path = self.layout.evaluation(scn);
            if path.exists() || scn == self.cfg.scenario {
                evals.push(read_json::<Evaluation>(&path)?);
            }
        }
        let mut results = Table::new(&RESULT_COLUMNS);
        let mut sweep = Table::new(&SWEEP_COLUMNS);
        let mut summary = Table::new(&SUMMARY_COLUMNS);
        let mut selections = Vec::new();
        let mut curves = Vec::new();
        for e in &evals {
            let scn = e.instances.first().map(|i| i.scenario).unwrap_or(self.cfg.scenario);
            results.extend(Table::read(&self.layout.results(scn))?)?;
            if self.layout.sweep(scn).exists() {
                sweep.extend(Table::read(&self.layout.sweep(scn))?)?;
            }
            for inst in &e.instances {
                selections.push(json!({
                    "scenario": inst.scenario,
                    "pi": inst.pi,
                    "l_star": inst.l_star,
                    "eta": inst.eta,
                    "lambda": inst.lambda,
                    "valid_score": inst.valid_score,
                }));
                for m in &inst.methods {
                    summary.push(vec![
                        inst.scenario.as_str().into(),
                        opt_num(inst.pi),
                        m.method.clone(),
                        m.layer.to_string(),
                        metric_name(inst.metric).into(),
                        num(m.summary.mean),
                        num(m.summary.std),
                        m.summary.n.to_string(),
                        inst.l_star.to_string(),
                        e.config_hash.clone(),
                    ]);
                }
                let mean = |m: &BTreeMap<u64, f64>| (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64);
                curves.push(json!({
                    "scenario": inst.scenario,
                    "pi": inst.pi,
                    "layers": inst.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
                    "test": inst.layers.iter().map(|l| mean(&l.test)).collect::<Vec<_>>(),
                    "id_accuracy": inst.layers.iter().map(|l| mean(&l.id_accuracy)).collect::<Vec<_>>(),
                }));
            }
        }
        results.write(&dir.join("results.csv"))?;
        summary.write(&dir.join("summary.csv"))?;
        if !sweep.rows.is_empty() {
            sweep.write(&dir.join("sweep.csv"))?;
        }
        let mut plot = json!({ "config_hash": self.hash, "layer_curves": curves });
        if self.layout.analysis().exists() {
            Table::read(&self.layout.analysis())?.write(&dir.join("analysis.csv"))?;
            plot["analysis"] = read_json::<Value>(&self.layout.plot_data())?;
        }
        write_json(&dir.join("plot_data.json"), &plot)?;

        let mut timings = serde_json::Map::new();
        for s in STAGES {
            let p = self.layout.timing(s);
            if p.exists() {
                let t: Value = read_json(&p)?;
                timings.insert(s.into(), t["seconds"].clone());
            }
        }
        let report = json!({
            "config_hash": self.hash,
            "name": self.cfg.name,
            "shift_kind": shift_name(self.cfg.dataset.shift_kind()),
            "metric": metric_name(self.cfg.metric()),
            "seeds": self.seeds(),
            "selections": selections,
            "evaluations": evals,
            "timings_seconds": timings,
            "config": self.cfg,
        });
        write_json(&dir.join("report.json"), &report)?;
        Ok(report)
    }
}

fn selected<'p>(ps: &'p ProbeSet, layer: usize, choice: &LayerChoice, seed: u64) -> Result<&'p Ilc> {
    let key = ProbeKey {
        eta: choice.hyper.eta,
        lambda: choice.hyper.lambda,
        seed,
    };
    ps.get(layer, &key)
        .ok_or_else(|| Error::Format(format!("no probe for layer {layer}, seed {seed}")))
}

/// Per-layer scores of each layer's validation-best configuration.
fn layer_curves(runs: &[SeedRun<'_>], ps: &ProbeSet, layers: &[usize], metric: Metric, with_id: bool) -> Result<Vec<LayerEval>> {
    let valid = ValidSets::PerSeed(runs.iter().map(|r| (r.seed, &r.valid)).collect());
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let choice = best_config(ps, l, &valid, metric)?;
        let mut test = BTreeMap::new();
        let mut id_accuracy = BTreeMap::new();
        for r in runs {
            let ilc = selected(ps, l, &choice, r.seed)?;
            test.insert(r.seed, score_ilc(ilc, &r.test, metric)?);
            if with_id {
                id_accuracy.insert(r.seed, score_ilc(ilc, &r.probe, Metric::Accuracy)?);
            }
        }
        out.push(LayerEval {
            layer: l,
            eta: choice.hyper.eta,
            lambda: choice.hyper.lambda,
            mean_valid: choice.mean_score,
            test,
            id_accuracy,
        });
    }
    Ok(out)
}

pub fn results_table(e: &Evaluation) -> Table {
    let mut t = Table::new(&RESULT_COLUMNS);
    for inst in &e.instances {
        let mut row = |method: &str, layer: usize, seed: u64, metric: &str, value: f64| {
            t.push(vec![
                inst.scenario.as_str().into(),
                e.dataset.clone(),
                e.shift_kind.clone(),
                opt_num(inst.pi),
                method.into(),
                layer.to_string(),
                seed.to_string(),
                metric.into(),
                num(value),
                e.config_hash.clone(),
            ]);
        };
        let name = metric_name(inst.metric);
        for m in &inst.methods {
            for (&s, &v) in &m.per_seed {
                row(&m.method, m.layer, s, name, v);
            }
        }
        for l in &inst.layers {
            for (&s, &v) in &l.test {
                row("layer_probe", l.layer, s, name, v);
            }
            for (&s, &v) in &l.id_accuracy {
                row("layer_probe", l.layer, s, "id_accuracy", v);
            }
        }
    }
    t
}

pub fn analysis_table(analyses: &[SeedAnalysis], hash: &str) -> Table {
    let mut t = Table::new(&ANALYSIS_COLUMNS);
    for a in analyses {
        let mut row = |layer: usize, group: String, metric: &str, value: f64| {
            t.push(vec![layer.to_string(), group, metric.into(), num(value), a.seed.to_string(), hash.into()]);
        };
        let sens_means = a.sensitivity.layer_means();
        for (&l, groups) in &a.sensitivity.per_layer {
            if let Some(&m) = sens_means.get(&l) {
                row(l, "all".into(), "sens", m);
            }
            for (&g, &v) in groups {
                row(l, g.to_string(), "sens", v);
            }
            if let Some(&v) = a.tvd.per_layer.get(&l) {
                row(l, "all".into(), "tvd", v);
            }
            for (&g, &v) in a.tvd.per_group.get(&l).into_iter().flatten() {
                row(l, g.to_string(), "tvd", v);
            }
            if let Some(&v) = a.collapse.cdnv.get(&l) {
                row(l, "all".into(), "cdnv", v);
            }
            if let Some(&v) = a.collapse.nc1.as_ref().and_then(|m| m.get(&l)) {
                row(l, "all".into(), "nc1", v);
            }
            if let Some(&v) = a.pca_explained.get(&l) {
                row(l, "all".into(), "pca_explained_ratio", v);
            }
            if let Some(&v) = a.pca_ilc.get(&l) {
                row(l, "all".into(), "pca_ilc", v);
            }
        }
    }
    t
}

/// `metric → group → per-layer mean over seeds`.
fn mean_series(t: &Table, layers: &[usize]) -> BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>> {
    let mut acc: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in &t.rows {
        let (Ok(l), Ok(v)) = (r[0].parse::<usize>(), r[3].parse::<f64>()) else { continue };
        acc.entry((r[2].clone(), r[1].clone(), l)).or_default().push(v);
    }
    let mut out: BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>> = BTreeMap::new();
    let keys: Vec<(String, String)> = acc.keys().map(|(m, g, _)| (m.clone(), g.clone())).collect();
    for (m, g) in keys {
        let series = layers
            .iter()
            .map(|&l| acc.get(&(m.clone(), g.clone(), l)).map(|v| v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        out.entry(m).or_default().insert(g, series);
    }
    out
}

/// Sum of per-coordinate variances, normalized by `n` like the PCA spectrum.
fn total_variance(m: &Matrix<f32>) -> f64 {
    let (n, d) = (m.rows(), m.cols());
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| m.get(r, c) as f64).sum::<f64>() / n as f64;
        total += (0..n).map(|r| (m.get(r, c) as f64 - mean).powi(2)).sum::<f64>();
    }
    total / n as f64
}
