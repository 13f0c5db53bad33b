//! Zero-shot and few-shot (π-sweep) evaluation protocols.
//!
//! Both protocols run over several seeds. Each seed brings its own backbone
//! and data draw ([`SeedRun`]); probes are trained per seed, the layer and
//! its (η, λ) are chosen once from the validation score averaged over
//! seeds, and every seed's probe is then scored on its own test split.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{DistTag, Scenario};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_std, EvalResult, Metric};
use crate::features::FeatureSet;
use crate::matrix::Matrix;
use crate::probe::{best_config, infer, select_layer, train_ilcs, HyperGrid, Ilc, JobRunner, LayerChoice, ProbeSet, Selection, ValidSets};

/// Everything one seed contributes to a protocol run.
#[derive(Debug, Clone)]
pub struct SeedRun<'a> {
    pub seed: u64,
    pub backbone: &'a Backbone<f32>,
    pub probe: FeatureSet,
    pub valid: FeatureSet,
    pub test: FeatureSet,
    /// Raw test inputs, for the backbone's own head and truncated inference.
    pub test_inputs: Matrix<f32>,
}

/// Fails unless every probe sample carries the tag the scenario allows.
pub fn audit_probe_split(probe: &FeatureSet, scenario: Scenario) -> Result<()> {
    let allowed = match scenario {
        Scenario::ZeroShot => DistTag::Id,
        Scenario::FewShot => DistTag::Ood,
    };
    let bad = probe.tags.iter().filter(|&&t| t != allowed).count();
    if bad > 0 {
        return Err(Error::ProtocolViolation(format!(
            "{bad} probe samples are not tagged {allowed:?} in the {scenario:?} scenario"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: &'static str,
    pub layer: usize,
    pub per_seed: BTreeMap<u64, EvalResult>,
    pub summary: Summary,
}

impl MethodResult {
    fn new(method: &'static str, layer: usize, per_seed: BTreeMap<u64, EvalResult>) -> Self {
        let values: Vec<f64> = per_seed.values().map(|r| r.value).collect();
        Self {
            method,
            layer,
            summary: Summary::of(&values),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub base: MethodResult,
    pub last: MethodResult,
    pub best: MethodResult,
    pub l_star: usize,
    pub selection: Selection,
    pub last_choice: LayerChoice,
    pub probes: ProbeSet,
}

fn check_runs(runs: &[SeedRun<'_>]) -> Result<usize> {
    let first = runs.first().ok_or(Error::EmptyInput)?;
    let depth = first.backbone.num_layers();
    if depth < 3 {
        return Err(Error::invalid("protocols need a backbone with at least 3 layers"));
    }
    for r in runs {
        if r.backbone.num_layers() != depth {
            return Err(Error::invalid("all seeds must use backbones of the same depth"));
        }
        if r.valid.is_empty() {
            return Err(Error::EmptyValidation);
        }
        if r.test_inputs.rows() != r.test.len() {
            return Err(Error::shape("test inputs", r.test.len(), r.test_inputs.rows()));
        }
    }
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != runs.len() {
        return Err(Error::invalid("seeds must be distinct"));
    }
    Ok(depth)
}

fn train_all<R: JobRunner>(runs: &[SeedRun<'_>], layers: &[usize], grid: &HyperGrid, epochs: usize, runner: &R) -> Result<ProbeSet> {
    let mut all = ProbeSet::default();
    for r in runs {
        all.merge(train_ilcs(&r.probe, layers, grid, epochs, &[r.seed], runner)?);
    }
    Ok(all)
}

fn valid_sets<'a>(runs: &'a [SeedRun<'_>]) -> ValidSets<'a> {
    ValidSets::PerSeed(runs.iter().map(|r| (r.seed, &r.valid)).collect())
}

fn ilc_for<'p>(ps: &'p ProbeSet, layer: usize, choice: &LayerChoice, seed: u64) -> Result<&'p Ilc> {
    let key = crate::probe::ProbeKey {
        eta: choice.hyper.eta,
        lambda: choice.hyper.lambda,
        seed,
    };
    ps.get(layer, &key).ok_or(Error::MissingLayer(layer))
}

fn eval_ilc(run: &SeedRun<'_>, layer: usize, ilc: &Ilc, metric: Metric) -> Result<EvalResult> {
    let out = infer(layer, ilc, run.backbone, &run.test_inputs)?;
    evaluate(&run.test.name, &out.predictions, &run.test.labels, &run.test.groups, run.test.num_groups, metric)
}

/// Audits every probe split for `scenario` and trains ILCs on layers
/// `1..L−1` of each seed.
pub fn train_protocol_probes<R: JobRunner>(
    runs: &[SeedRun<'_>],
    scenario: Scenario,
    grid: &HyperGrid,
    epochs: usize,
    runner: &R,
) -> Result<ProbeSet> {
    let depth = check_runs(runs)?;
    for r in runs {
        audit_probe_split(&r.probe, scenario)?;
    }
    let layers: Vec<usize> = (1..depth).collect();
    train_all(runs, &layers, grid, epochs, runner)
}

/// Base (backbone head), Last (ILC on the penultimate layer) and Best (ILC
/// at the selected `l* ≤ L−2`), all probed on ID data and scored on the
/// OOD test split. `max_layer` defaults to `L−2`.
pub fn run_zero_shot<R: JobRunner>(
    runs: &[SeedRun<'_>],
    grid: &HyperGrid,
    epochs: usize,
    metric: Metric,
    max_layer: Option<usize>,
    runner: &R,
) -> Result<ZeroShotResult> {
    let probes = train_protocol_probes(runs, Scenario::ZeroShot, grid, epochs, runner)?;
    evaluate_zero_shot(runs, probes, metric, max_layer)
}

/// The selection and scoring half of [`run_zero_shot`], on already trained
/// probes.
pub fn evaluate_zero_shot(runs: &[SeedRun<'_>], mut probes: ProbeSet, metric: Metric, max_layer: Option<usize>) -> Result<ZeroShotResult> {
    let depth = check_runs(runs)?;
    for r in runs {
        audit_probe_split(&r.probe, Scenario::ZeroShot)?;
    }
    let penultimate = depth - 1;
    let cap = max_layer.unwrap_or(depth - 2).min(depth - 2);
    let valid = valid_sets(runs);
    let selection = select_layer(&probes, &valid, metric, cap)?;
    let last_choice = best_config(&probes, penultimate, &valid, metric)?;
    probes.record_selection(&selection);
    probes.val_scores.insert(penultimate, last_choice.mean_score);

    let mut base = BTreeMap::new();
    let mut last = BTreeMap::new();
    let mut best = BTreeMap::new();
    for r in runs {
        let preds = r.backbone.predict(&r.test_inputs)?;
        base.insert(r.seed, evaluate(&r.test.name, &preds, &r.test.labels, &r.test.groups, r.test.num_groups, metric)?);
        last.insert(r.seed, eval_ilc(r, penultimate, ilc_for(&probes, penultimate, &last_choice, r.seed)?, metric)?);
        best.insert(r.seed, eval_ilc(r, selection.layer, ilc_for(&probes, selection.layer, &selection.per_layer[&selection.layer], r.seed)?, metric)?);
    }
    Ok(ZeroShotResult {
        base: MethodResult::new("base", depth, base),
        last: MethodResult::new("last_layer", penultimate, last),
        best: MethodResult::new("best_layer", selection.layer, best),
        l_star: selection.layer,
        selection,
        last_choice,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiEntry {
    pub pi: f64,
    pub l_star: usize,
    pub ilc_best: MethodResult,
    pub last_layer: MethodResult,
    pub selection: Selection,
    /// Test score of every layer's validation-best probe, per seed.
    pub layer_test: BTreeMap<usize, BTreeMap<u64, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiSweepResult {
    pub pis: Vec<f64>,
    pub per_pi: Vec<PiEntry>,
}

impl PiSweepResult {
    pub fn entry(&self, pi: f64) -> Option<&PiEntry> {
        self.per_pi.iter().find(|e| e.pi == pi)
    }
}

pub fn validate_pis(pis: &[f64]) -> Result<()> {
    if pis.is_empty() {
        return Err(Error::invalid("pi list is empty"));
    }
    for &p in pis {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("pi must lie in (0, 1], got {p}")));
        }
    }
    if pis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("pi values must be strictly increasing"));
    }
    Ok(())
}

/// One few-shot protocol run at a fixed π: probes trained on the OOD probe
/// split, `l* ≤ max_layer` selected on the OOD validation split, both the
/// selected ILC and the penultimate-layer ILC scored on the test split.
pub fn run_few_shot<R: JobRunner>(
    pi: f64,
    runs: &[SeedRun<'_>],
    grid: &HyperGrid,
    epochs: usize,
    metric: Metric,
    max_layer: Option<usize>,
    runner: &R,
) -> Result<PiEntry> {
    let probes = train_protocol_probes(runs, Scenario::FewShot, grid, epochs, runner)?;
    evaluate_few_shot(pi, runs, &probes, metric, max_layer)
}

/// The selection and scoring half of [`run_few_shot`].
pub fn evaluate_few_shot(pi: f64, runs: &[SeedRun<'_>], probes: &ProbeSet, metric: Metric, max_layer: Option<usize>) -> Result<PiEntry> {
    let depth = check_runs(runs)?;
    for r in runs {
        audit_probe_split(&r.probe, Scenario::FewShot)?;
    }
    let penultimate = depth - 1;
    let cap = max_layer.unwrap_or(depth - 2).min(depth - 2);
    let layers: Vec<usize> = (1..=penultimate).collect();
    let valid = valid_sets(runs);
    let selection = select_layer(probes, &valid, metric, cap)?;
    let last_choice = best_config(probes, penultimate, &valid, metric)?;

    let mut layer_test: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut last = BTreeMap::new();
    let mut best = BTreeMap::new();
    for r in runs {
        for &l in &layers {
            let choice = if l == penultimate { &last_choice } else { &selection.per_layer[&l] };
            let res = eval_ilc(r, l, ilc_for(probes, l, choice, r.seed)?, metric)?;
            layer_test.entry(l).or_default().insert(r.seed, res.value);
            if l == penultimate {
                last.insert(r.seed, res.clone());
            }
            if l == selection.layer {
                best.insert(r.seed, res);
            }
        }
    }
    Ok(PiEntry {
        pi,
        l_star: selection.layer,
        ilc_best: MethodResult::new("best_layer", selection.layer, best),
        last_layer: MethodResult::new("last_layer", penultimate, last),
        selection,
        layer_test,
    })
}

/// Few-shot protocol for each π; `factory(pi)` builds the per-seed runs.
pub fn run_pi_sweep<'a, R, F>(
    pis: &[f64],
    mut factory: F,
    grid: &HyperGrid,
    epochs: usize,
    metric: Metric,
    max_layer: Option<usize>,
    runner: &R,
) -> Result<PiSweepResult>
where
    R: JobRunner,
    F: FnMut(f64) -> Result<Vec<SeedRun<'a>>>,
{
    validate_pis(pis)?;
    let mut per_pi = Vec::with_capacity(pis.len());
    for &pi in pis {
        let runs = factory(pi)?;
        per_pi.push(run_few_shot(pi, &runs, grid, epochs, metric, max_layer, runner)?);
    }
    Ok(PiSweepResult {
        pis: pis.to_vec(),
        per_pi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, mlp_spec, train_backbone, BackboneTrainConfig};
    use crate::data::{gen_subpopulation_shift, make_splits, SubpopShiftParams};
    use crate::probe::Sequential;
    use alloc::vec;

    fn small_grid(scenario: Scenario) -> HyperGrid {
        HyperGrid {
            etas: vec![1e-2],
            lambdas: vec![0.0],
            scenario,
        }
    }

    fn setup(seed: u64) -> (Backbone<f32>, crate::data::LabeledDataset, crate::data::LabeledDataset) {
        let params = SubpopShiftParams {
            n_per_group: vec![120, 120, 20, 20],
            n_test_per_group: 60,
            ..Default::default()
        };
        let (id, ood) = gen_subpopulation_shift(&params, seed).unwrap();
        let spec = mlp_spec(id.input_dim, 16, 5, 2, true);
        let b = build_backbone(&spec, seed).unwrap();
        let cfg = BackboneTrainConfig {
            epochs: 5,
            seed,
            ..Default::default()
        };
        let (b, _) = train_backbone(b, &id.features(), &id.labels(), 2, &cfg).unwrap();
        (b, id, ood)
    }

    fn run_for<'a>(b: &'a Backbone<f32>, bundle: &crate::data::SplitBundle, seed: u64) -> SeedRun<'a> {
        SeedRun {
            seed,
            backbone: b,
            probe: FeatureSet::extract("probe", b, &bundle.probe).unwrap(),
            valid: FeatureSet::extract("valid", b, &bundle.valid).unwrap(),
            test: FeatureSet::extract("test", b, &bundle.test).unwrap(),
            test_inputs: bundle.test.features(),
        }
    }

    #[test]
    fn zero_shot_reports_three_methods_under_cap() {
        let (b, id, ood) = setup(1);
        let bundle = make_splits(&id, &ood, Scenario::ZeroShot, None, 1).unwrap();
        let runs = [run_for(&b, &bundle, 1)];
        let r = run_zero_shot(&runs, &small_grid(Scenario::ZeroShot), 3, Metric::WorstGroupAccuracy, None, &Sequential).unwrap();
        assert!(r.l_star <= b.num_layers() - 2);
        assert_eq!(r.last.layer, b.num_layers() - 1);
        assert_eq!(r.base.per_seed.len(), 1);
        assert_eq!(r.probes.layers(), (1..b.num_layers()).collect::<Vec<_>>());
    }

    #[test]
    fn zero_shot_rejects_ood_in_probe() {
        let (b, id, ood) = setup(2);
        let bundle = make_splits(&id, &ood, Scenario::ZeroShot, None, 2).unwrap();
        let mut run = run_for(&b, &bundle, 2);
        run.probe.tags[0] = DistTag::Ood;
        let err = run_zero_shot(&[run], &small_grid(Scenario::ZeroShot), 1, Metric::Accuracy, None, &Sequential).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn pi_sweep_rows_and_validation() {
        let (b, id, ood) = setup(3);
        let pis = [0.5, 1.0];
        let res = run_pi_sweep(
            &pis,
            |pi| {
                let bundle = make_splits(&id, &ood, Scenario::FewShot, Some(pi), 3)?;
                Ok(vec![run_for(&b, &bundle, 3)])
            },
            &small_grid(Scenario::FewShot),
            2,
            Metric::Accuracy,
            None,
            &Sequential,
        )
        .unwrap();
        let rows: usize = res.per_pi.iter().map(|e| e.ilc_best.per_seed.len() + e.last_layer.per_seed.len()).sum();
        assert_eq!(rows, pis.len() * 2);
        assert!(validate_pis(&[0.5, 0.5]).is_err());
        assert!(validate_pis(&[0.0]).is_err());
        assert!(validate_pis(&[1.5]).is_err());
    }
}
