//! Experiment configuration: one JSON document, overridable by dotted paths.

use std::path::{Path, PathBuf};

use ilc_core::analysis::{DEFAULT_PCA_DIM, DEFAULT_TVD_BINS};
use ilc_core::data::{ConditionalShiftParams, NoiseKind, Scenario, ShiftKind, SubpopShiftParams};
use ilc_core::eval::Metric;
use ilc_core::probe::{HyperGrid, DEFAULT_EPOCHS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Conditional(ConditionalShiftParams),
    Subpopulation(SubpopShiftParams),
    InputNoise(InputNoiseConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputNoiseConfig {
    pub base: SubpopShiftParams,
    pub noise: NoiseKind,
    pub severity: f64,
}

impl Default for InputNoiseConfig {
    fn default() -> Self {
        Self {
            base: SubpopShiftParams::default(),
            noise: NoiseKind::Gaussian,
            severity: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn shift_kind(&self) -> ShiftKind {
        match self {
            DatasetConfig::Conditional(_) => ShiftKind::Conditional,
            DatasetConfig::Subpopulation(_) => ShiftKind::Subpopulation,
            DatasetConfig::InputNoise(_) => ShiftKind::InputNoise,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Conditional(_) => "conditional",
            DatasetConfig::Subpopulation(_) => "subpopulation",
            DatasetConfig::InputNoise(_) => "input_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Number of layers including the head.
    pub depth: usize,
    pub width: usize,
    pub residual: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 64,
            residual: true,
            epochs: 60,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    ZeroShot,
    FewShot,
}

impl ScenarioName {
    pub fn scenario(self) -> Scenario {
        match self {
            ScenarioName::ZeroShot => Scenario::ZeroShot,
            ScenarioName::FewShot => Scenario::FewShot,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::ZeroShot => "zero-shot",
            ScenarioName::FewShot => "few-shot",
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero-shot" => Ok(ScenarioName::ZeroShot),
            "few-shot" => Ok(ScenarioName::FewShot),
            other => Err(format!("unknown scenario '{other}' (expected zero-shot or few-shot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub tvd_bins: usize,
    pub pca_dim: usize,
    pub nc1: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tvd_bins: DEFAULT_TVD_BINS,
            pca_dim: DEFAULT_PCA_DIM,
            nc1: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root seed; run `i` uses seed `seed + i`.
    pub seed: u64,
    pub num_seeds: usize,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub scenario: ScenarioName,
    /// π values of the few-shot sweep.
    pub pis: Vec<f64>,
    /// Replaces the scenario's default (η, λ) grid.
    pub grid: Option<GridConfig>,
    pub probe_epochs: usize,
    pub max_layer: Option<usize>,
    /// Defaults to worst-group accuracy for subpopulation shift and
    /// accuracy otherwise.
    pub metric: Option<Metric>,
    pub analysis: AnalysisConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy-cmnist".into(),
            seed: 0,
            num_seeds: 3,
            dataset: DatasetConfig::Conditional(ConditionalShiftParams::default()),
            backbone: BackboneConfig::default(),
            scenario: ScenarioName::ZeroShot,
            pis: vec![0.03, 0.05, 1.0],
            grid: None,
            probe_epochs: DEFAULT_EPOCHS,
            max_layer: None,
            metric: None,
            analysis: AnalysisConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or_else(|| Metric::for_shift(self.dataset.shift_kind()))
    }

    pub fn grid_for(&self, scenario: ScenarioName) -> HyperGrid {
        let mut g = HyperGrid::for_scenario(scenario.scenario());
        if let Some(o) = &self.grid {
            g.etas = o.etas.clone();
            g.lambdas = o.lambdas.clone();
        }
        g
    }

    /// Stable short hash of everything that affects results; `out_dir` is
    /// excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    /// Checks every field before any work starts; errors carry the dotted
    /// path of the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        if self.num_seeds == 0 {
            return bad("num_seeds", "at least one seed is required".into());
        }
        match &self.dataset {
            DatasetConfig::Conditional(p) => {
                if !(p.corr > 0.5 && p.corr <= 1.0) {
                    return bad("dataset.corr", format!("must lie in (0.5, 1], got {}", p.corr));
                }
                if !(p.label_noise >= 0.0 && p.label_noise < 0.5) {
                    return bad("dataset.label_noise", format!("must lie in [0, 0.5), got {}", p.label_noise));
                }
                if p.n_train == 0 {
                    return bad("dataset.n_train", "must be positive".into());
                }
                if p.n_test < 2 {
                    return bad("dataset.n_test", "must be at least 2".into());
                }
                p.validate().map_err(|e| Error::config("dataset.geometry", e.to_string()))?;
            }
            DatasetConfig::Subpopulation(p) => validate_subpop(p, "dataset")?,
            DatasetConfig::InputNoise(p) => {
                validate_subpop(&p.base, "dataset.base")?;
                if !(p.severity >= 0.0 && p.severity.is_finite()) || (p.noise == NoiseKind::Mask && p.severity > 1.0) {
                    return bad("dataset.severity", format!("invalid severity {}", p.severity));
                }
            }
        }
        let b = &self.backbone;
        if b.depth < 3 {
            return bad("backbone.depth", format!("must be at least 3, got {}", b.depth));
        }
        if b.width == 0 {
            return bad("backbone.width", "must be positive".into());
        }
        if b.batch_size == 0 {
            return bad("backbone.batch_size", "must be positive".into());
        }
        if !(b.lr > 0.0 && b.lr.is_finite()) {
            return bad("backbone.lr", format!("must be positive, got {}", b.lr));
        }
        if let Err(e) = ilc_core::protocol::validate_pis(&self.pis) {
            return bad("pis", e.to_string());
        }
        if let Some(g) = &self.grid {
            if g.etas.is_empty() || g.etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
                return bad("grid.etas", "learning rates must be positive".into());
            }
            if g.lambdas.is_empty() || g.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
                return bad("grid.lambdas", "L1 strengths must be non-negative".into());
            }
        }
        if self.probe_epochs == 0 {
            return bad("probe_epochs", "must be positive".into());
        }
        if let Some(m) = self.max_layer {
            if m == 0 || m > b.depth - 2 {
                return bad("max_layer", format!("must lie in 1..={}, got {m}", b.depth - 2));
            }
        }
        if self.analysis.tvd_bins == 0 {
            return bad("analysis.tvd_bins", "must be positive".into());
        }
        if self.analysis.pca_dim == 0 {
            return bad("analysis.pca_dim", "must be positive".into());
        }
        Ok(())
    }
}

fn validate_subpop(p: &SubpopShiftParams, prefix: &str) -> Result<()> {
    if p.n_test_per_group < 2 {
        return Err(Error::config(format!("{prefix}.n_test_per_group"), "must be at least 2"));
    }
    p.validate().map_err(|e| Error::config(prefix, e.to_string()))
}

/// Sets `path` (dotted) inside `root` to `value`, creating objects on the
/// way. `value` is parsed as JSON when possible and kept as a string
/// otherwise.
pub fn set_path(root: &mut Value, path: &str, value: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::config(parts[..i].join("."), "is not an object"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

fn from_value(v: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        Error::config(path, e.into_inner().to_string())
    })
}

/// Parses a config document, applies `key=value` overrides and validates.
pub fn resolve(doc: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match doc {
        Some(text) => {
            let v: Value = serde_json::from_str(text).map_err(|e| Error::config("", format!("invalid JSON: {e}")))?;
            from_value(v)?
        }
        None => ExperimentConfig::default(),
    };
    // Round-trip through the typed form so overrides land on a complete
    // document (the dataset tag in particular).
    let mut v = serde_json::to_value(&base)?;
    for o in overrides {
        let (k, val) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.as_str(), "override must look like path=value"))?;
        set_path(&mut v, k.trim(), val.trim())?;
    }
    let cfg = from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::config("--config", format!("{} does not exist", p.display())),
                _ => Error::io(p, e),
            })?;
            resolve(Some(&text), overrides)
        }
        None => resolve(None, overrides),
    }
}
