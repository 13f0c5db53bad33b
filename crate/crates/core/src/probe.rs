//! Intermediate Layer Classifiers: affine probes `W_l r_l(x) + b_l` trained
//! on frozen layer-`l` features, the hyperparameter sweep over them, layer
//! selection on a validation split and truncated inference.
//!
//! Training decouples across layers: the joint objective is a sum of
//! per-layer cross-entropies over disjoint parameters, so each
//! (layer, η, λ, seed) probe is trained as an independent job. Every job with
//! the same seed visits the same mini-batch sequence, which makes the result
//! identical to the joint loop.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::eval::{score_predictions, Metric};
use crate::features::FeatureSet;
use crate::matrix::Matrix;
use crate::optim::{Adam, AdamConfig};
use crate::real::{argmax, softmax_into};
use crate::rng::{indexed_substream, substream};

pub const DEFAULT_EPOCHS: usize = 100;
pub const PROBE_BATCH_SIZE: usize = 128;
pub const NONLINEAR_HIDDEN: usize = 512;
pub const DEFAULT_NONLINEAR_SEEDS: [u64; 3] = [0, 1, 2];

/// Learning rate and L1 strength of one probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub eta: f64,
    pub lambda: f64,
}

/// Sweep key within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeKey {
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl ProbeKey {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            eta: self.eta,
            lambda: self.lambda,
        }
    }
}

impl Eq for ProbeKey {}

impl Ord for ProbeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.eta
            .total_cmp(&other.eta)
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.seed.cmp(&other.seed))
    }
}

impl PartialOrd for ProbeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub scenario: Scenario,
}

impl HyperGrid {
    /// {1e-4, 1e-3, 1e-2} × {0, 1e-3, 1e-2}
    pub fn zero_shot() -> Self {
        Self {
            etas: alloc::vec![1e-4, 1e-3, 1e-2],
            lambdas: alloc::vec![0.0, 1e-3, 1e-2],
            scenario: Scenario::ZeroShot,
        }
    }

    /// {1e-4, 1e-3, 1e-2} × {0, 1e-4, 1e-3, 1e-2}
    pub fn few_shot() -> Self {
        Self {
            etas: alloc::vec![1e-4, 1e-3, 1e-2],
            lambdas: alloc::vec![0.0, 1e-4, 1e-3, 1e-2],
            scenario: Scenario::FewShot,
        }
    }

    pub fn for_scenario(scenario: Scenario) -> Self {
        match scenario {
            Scenario::ZeroShot => Self::zero_shot(),
            Scenario::FewShot => Self::few_shot(),
        }
    }

    pub fn configs(&self) -> Vec<Hyper> {
        let mut out = Vec::with_capacity(self.len());
        for &eta in &self.etas {
            for &lambda in &self.lambdas {
                out.push(Hyper { eta, lambda });
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.etas.len() * self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("hyperparameter grid is empty"));
        }
        if self.etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid("L1 strengths must be non-negative"));
        }
        Ok(())
    }
}

/// Affine probe on layer `layer`: `logits = W r + b`, `W` is `K × d_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ilc {
    pub layer: usize,
    pub weight: Matrix<f32>,
    pub bias: Vec<f32>,
    pub hyper: Hyper,
    pub seed: u64,
}

impl Ilc {
    pub fn zeros(layer: usize, num_classes: usize, dim: usize, hyper: Hyper, seed: u64) -> Self {
        Self {
            layer,
            weight: Matrix::zeros(num_classes, dim),
            bias: alloc::vec![0.0; num_classes],
            hyper,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weight.as_slice().iter().map(|w| (*w as f64).abs()).sum()
    }

    pub fn key(&self) -> ProbeKey {
        ProbeKey {
            eta: self.hyper.eta,
            lambda: self.hyper.lambda,
            seed: self.seed,
        }
    }

    pub fn predict(&self, features: &Matrix<f32>) -> Result<Vec<usize>> {
        Ok(ilc_forward(self, features)?.iter_rows().map(argmax).collect())
    }
}

/// `features · Wᵀ + b`, accumulated in `f64`.
pub fn ilc_forward(p: &Ilc, features: &Matrix<f32>) -> Result<Matrix<f64>> {
    if features.cols() != p.dim() {
        return Err(Error::shape("ILC input", p.dim(), features.cols()));
    }
    let k = p.num_classes();
    let mut out = Matrix::zeros(features.rows(), k);
    for (i, row) in features.iter_rows().enumerate() {
        let o = out.row_mut(i);
        for c in 0..k {
            let mut acc = p.bias[c] as f64;
            for (w, x) in p.weight.row(c).iter().zip(row) {
                acc += *w as f64 * *x as f64;
            }
            o[c] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub layer: usize,
    pub hyper: Hyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trained probe with the mean objective of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedIlc {
    pub ilc: Ilc,
    pub epoch_losses: Vec<f64>,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    let mut seen = alloc::vec![false; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} outside 0..{num_classes}")));
        }
        seen[y] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(Error::MissingClass(c)),
        None => Ok(()),
    }
}

/// Mini-batch order for `epoch`; shared by every probe trained with `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut indexed_substream(seed, "probe/order", epoch as u64));
    order
}

/// Fits one ILC from the zero point with Adam on
/// `mean CE(softmax(W r + b), y) + λ‖W‖₁`. The bias is not regularized.
pub fn train_ilc(features: &Matrix<f64>, labels: &[usize], num_classes: usize, cfg: &ProbeTrainConfig) -> Result<TrainedIlc> {
    let n = features.rows();
    let d = features.cols();
    if n != labels.len() {
        return Err(Error::shape("probe labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    check_labels(labels, num_classes)?;
    let k = num_classes;
    let lambda = cfg.hyper.lambda;
    let mut w = alloc::vec![0.0f64; k * d];
    let mut b = alloc::vec![0.0f64; k];
    let mut gw = alloc::vec![0.0f64; k * d];
    let mut gb = alloc::vec![0.0f64; k];
    let mut logits = alloc::vec![0.0f64; k];
    let mut probs = alloc::vec![0.0f64; k];
    let mut opt = Adam::new(&[k * d, k], cfg.hyper.eta, AdamConfig::default());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            let mut ce = 0.0;
            for &i in batch {
                let x = features.row(i);
                for c in 0..k {
                    let wc = &w[c * d..(c + 1) * d];
                    logits[c] = b[c] + wc.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                }
                let lse = softmax_into(&logits, &mut probs);
                ce += lse - logits[labels[i]];
                probs[labels[i]] -= 1.0;
                for c in 0..k {
                    let coef = probs[c] * inv;
                    gb[c] += coef;
                    for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += coef * v;
                    }
                }
            }
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            let loss = ce * inv + lambda * l1;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if lambda > 0.0 {
                for (g, &v) in gw.iter_mut().zip(&w) {
                    // Subgradient of |v|, taken as 0 at v = 0.
                    if v > 0.0 {
                        *g += lambda;
                    } else if v < 0.0 {
                        *g -= lambda;
                    }
                }
            }
            opt.begin_step();
            opt.update(0, &mut w, &gw);
            opt.update(1, &mut b, &gb);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::Divergence { epoch: cfg.epochs });
    }
    let weight = Matrix::from_vec(k, d, w.iter().map(|&v| v as f32).collect())?;
    Ok(TrainedIlc {
        ilc: Ilc {
            layer: cfg.layer,
            weight,
            bias: b.iter().map(|&v| v as f32).collect(),
            hyper: cfg.hyper,
            seed: cfg.seed,
        },
        epoch_losses,
    })
}

/// The objective `train_ilc` minimizes, evaluated on a full dataset for the
/// given parameters (used for gradient checks).
pub fn probe_objective(features: &Matrix<f64>, labels: &[usize], weight: &[f64], bias: &[f64], lambda: f64) -> f64 {
    let k = bias.len();
    let d = features.cols();
    let mut logits = alloc::vec![0.0; k];
    let mut probs = alloc::vec![0.0; k];
    let mut ce = 0.0;
    for (i, x) in features.iter_rows().enumerate() {
        for c in 0..k {
            logits[c] = bias[c] + weight[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        ce += softmax_into(&logits, &mut probs) - logits[labels[i]];
    }
    ce / features.rows() as f64 + lambda * weight.iter().map(|v| v.abs()).sum::<f64>()
}

/// Analytic (sub)gradient of [`probe_objective`].
pub fn probe_gradient(features: &Matrix<f64>, labels: &[usize], weight: &[f64], bias: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let k = bias.len();
    let d = features.cols();
    let inv = 1.0 / features.rows() as f64;
    let mut gw = alloc::vec![0.0; k * d];
    let mut gb = alloc::vec![0.0; k];
    let mut logits = alloc::vec![0.0; k];
    let mut probs = alloc::vec![0.0; k];
    for (i, x) in features.iter_rows().enumerate() {
        for c in 0..k {
            logits[c] = bias[c] + weight[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        softmax_into(&logits, &mut probs);
        probs[labels[i]] -= 1.0;
        for c in 0..k {
            gb[c] += probs[c] * inv;
            for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g += probs[c] * inv * v;
            }
        }
    }
    for (g, &w) in gw.iter_mut().zip(weight) {
        if w > 0.0 {
            *g += lambda;
        } else if w < 0.0 {
            *g -= lambda;
        }
    }
    (gw, gb)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Executes independent jobs and returns results in job order.
pub trait JobRunner {
    fn run<J, R, F>(&self, jobs: &[J], f: F) -> Vec<R>
    where
        J: Sync,
        R: Send,
        F: Fn(&J) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl JobRunner for Sequential {
    fn run<J, R, F>(&self, jobs: &[J], f: F) -> Vec<R>
    where
        J: Sync,
        R: Send,
        F: Fn(&J) -> R + Sync + Send,
    {
        jobs.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeSet {
    pub probes: BTreeMap<usize, BTreeMap<ProbeKey, Ilc>>,
    pub epoch_losses: BTreeMap<usize, BTreeMap<ProbeKey, Vec<f64>>>,
    pub epochs: usize,
    /// Best mean validation score per layer, filled by [`ProbeSet::record_selection`].
    pub val_scores: BTreeMap<usize, f64>,
}

impl ProbeSet {
    pub fn layers(&self) -> Vec<usize> {
        self.probes.keys().copied().collect()
    }

    pub fn get(&self, layer: usize, key: &ProbeKey) -> Option<&Ilc> {
        self.probes.get(&layer)?.get(key)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.probes.values().flat_map(|m| m.keys().map(|k| k.seed)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn len(&self) -> usize {
        self.probes.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&mut self, ilc: Ilc) {
        self.probes.entry(ilc.layer).or_default().insert(ilc.key(), ilc);
    }

    /// Restriction to one layer.
    pub fn only_layer(&self, layer: usize) -> Self {
        let mut out = Self {
            epochs: self.epochs,
            ..Default::default()
        };
        if let Some(m) = self.probes.get(&layer) {
            out.probes.insert(layer, m.clone());
        }
        if let Some(m) = self.epoch_losses.get(&layer) {
            out.epoch_losses.insert(layer, m.clone());
        }
        if let Some(&v) = self.val_scores.get(&layer) {
            out.val_scores.insert(layer, v);
        }
        out
    }

    /// Union of probe sets trained on different seeds.
    pub fn merge(&mut self, other: ProbeSet) {
        for (l, m) in other.probes {
            self.probes.entry(l).or_default().extend(m);
        }
        for (l, m) in other.epoch_losses {
            self.epoch_losses.entry(l).or_default().extend(m);
        }
        self.epochs = self.epochs.max(other.epochs);
    }

    pub fn record_selection(&mut self, sel: &Selection) {
        for (&l, choice) in &sel.per_layer {
            self.val_scores.insert(l, choice.mean_score);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ProbeJob {
    layer: usize,
    hyper: Hyper,
    seed: u64,
}

/// Trains one ILC per (layer, η, λ, seed).
pub fn train_ilcs<R: JobRunner>(
    features: &FeatureSet,
    layers: &[usize],
    grid: &HyperGrid,
    epochs: usize,
    seeds: &[u64],
    runner: &R,
) -> Result<ProbeSet> {
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    check_labels(&features.labels, features.num_classes)?;
    let mut wide: BTreeMap<usize, Matrix<f64>> = BTreeMap::new();
    for &l in layers {
        wide.insert(l, features.layer(l)?.to_f64());
    }
    let mut jobs = Vec::new();
    for &layer in layers {
        for hyper in grid.configs() {
            for &seed in seeds {
                jobs.push(ProbeJob { layer, hyper, seed });
            }
        }
    }
    let results = runner.run(&jobs, |job| {
        let cfg = ProbeTrainConfig {
            layer: job.layer,
            hyper: job.hyper,
            epochs,
            batch_size: PROBE_BATCH_SIZE,
            seed: job.seed,
        };
        train_ilc(&wide[&job.layer], &features.labels, features.num_classes, &cfg)
    });
    let mut set = ProbeSet {
        epochs,
        ..Default::default()
    };
    for r in results {
        let t = r?;
        set.epoch_losses.entry(t.ilc.layer).or_default().insert(t.ilc.key(), t.epoch_losses);
        set.insert(t.ilc);
    }
    Ok(set)
}

/// Last-layer retraining: the sweep restricted to the penultimate layer.
pub fn last_layer_retrain<R: JobRunner>(
    features: &FeatureSet,
    penultimate: usize,
    grid: &HyperGrid,
    epochs: usize,
    seeds: &[u64],
    runner: &R,
) -> Result<ProbeSet> {
    train_ilcs(features, &[penultimate], grid, epochs, seeds, runner)
}

// ---------------------------------------------------------------------------
// Selection and inference
// ---------------------------------------------------------------------------

/// Validation data keyed by seed: one shared split, or one per seed when
/// each seed has its own backbone and data draw.
#[derive(Debug, Clone)]
pub enum ValidSets<'a> {
    Shared(&'a FeatureSet),
    PerSeed(BTreeMap<u64, &'a FeatureSet>),
}

impl<'a> ValidSets<'a> {
    pub fn get(&self, seed: u64) -> Result<&'a FeatureSet> {
        match self {
            ValidSets::Shared(f) => Ok(f),
            ValidSets::PerSeed(m) => m
                .get(&seed)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no validation split for seed {seed}"))),
        }
    }
}

/// Best configuration found for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerChoice {
    pub hyper: Hyper,
    /// Mean validation score across seeds.
    pub mean_score: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub layer: usize,
    pub hyper: Hyper,
    pub score: f64,
    /// The selected layer's best ILC for every seed.
    pub ilcs: Vec<Ilc>,
    pub per_layer: BTreeMap<usize, LayerChoice>,
    pub metric: Metric,
}

/// Validation score of one probe.
pub fn score_ilc(ilc: &Ilc, split: &FeatureSet, metric: Metric) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let preds = ilc.predict(split.layer(ilc.layer)?)?;
    score_predictions(&preds, &split.labels, &split.groups, split.num_groups, metric)
}

/// Best (η, λ) of one layer by mean validation score across seeds; ties go
/// to the earlier configuration in grid order.
pub fn best_config(ps: &ProbeSet, layer: usize, valid: &ValidSets<'_>, metric: Metric) -> Result<LayerChoice> {
    let probes = ps.probes.get(&layer).ok_or(Error::MissingLayer(layer))?;
    let mut by_hyper: Vec<(Hyper, BTreeMap<u64, f64>)> = Vec::new();
    for (key, ilc) in probes {
        let score = score_ilc(ilc, valid.get(key.seed)?, metric)?;
        match by_hyper.iter_mut().find(|(h, _)| *h == key.hyper()) {
            Some((_, m)) => {
                m.insert(key.seed, score);
            }
            None => {
                let mut m = BTreeMap::new();
                m.insert(key.seed, score);
                by_hyper.push((key.hyper(), m));
            }
        }
    }
    let mut best: Option<LayerChoice> = None;
    for (hyper, per_seed) in by_hyper {
        let mean = per_seed.values().sum::<f64>() / per_seed.len() as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean_score) {
            best = Some(LayerChoice {
                hyper,
                mean_score: mean,
                per_seed,
            });
        }
    }
    best.ok_or(Error::MissingLayer(layer))
}

/// Picks `l* = argmax_l` of the best mean validation score over layers
/// `1..=max_layer`; ties go to the smaller layer.
pub fn select_layer(ps: &ProbeSet, valid: &ValidSets<'_>, metric: Metric, max_layer: usize) -> Result<Selection> {
    let candidates: Vec<usize> = ps.layers().into_iter().filter(|&l| l >= 1 && l <= max_layer).collect();
    if candidates.is_empty() {
        return Err(Error::MissingLayer(max_layer));
    }
    let mut per_layer = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for l in candidates {
        let choice = best_config(ps, l, valid, metric)?;
        if best.is_none_or(|(_, s)| choice.mean_score > s) {
            best = Some((l, choice.mean_score));
        }
        per_layer.insert(l, choice);
    }
    let (layer, score) = best.expect("at least one candidate layer");
    let hyper = per_layer[&layer].hyper;
    let ilcs = ps.probes[&layer]
        .iter()
        .filter(|(k, _)| k.hyper() == hyper)
        .map(|(_, ilc)| ilc.clone())
        .collect();
    Ok(Selection {
        layer,
        hyper,
        score,
        ilcs,
        per_layer,
        metric,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predictions: Vec<usize>,
    pub logits: Matrix<f64>,
    /// Number of backbone layers evaluated; equals `l*`.
    pub layers_evaluated: usize,
}

/// Prediction with the backbone truncated after `l_star`; layers above it
/// are never evaluated.
pub fn infer(l_star: usize, ilc: &Ilc, backbone: &Backbone<f32>, x: &Matrix<f32>) -> Result<Inference> {
    if ilc.layer != l_star {
        return Err(Error::invalid(format!("ILC belongs to layer {}, not {l_star}", ilc.layer)));
    }
    let (rep, layers_evaluated) = backbone.forward_truncated(x, l_star)?;
    let logits = ilc_forward(ilc, &rep)?;
    let predictions = logits.iter_rows().map(argmax).collect();
    Ok(Inference {
        predictions,
        logits,
        layers_evaluated,
    })
}

// ---------------------------------------------------------------------------
// Non-linear probes
// ---------------------------------------------------------------------------

/// One-hidden-layer probe: `head(relu(hidden(r)))` with 512 hidden units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLinearProbe {
    pub layer: usize,
    /// `512 × d_l`
    pub hidden_weight: Matrix<f32>,
    pub hidden_bias: Vec<f32>,
    /// `K × 512`
    pub head_weight: Matrix<f32>,
    pub head_bias: Vec<f32>,
    pub hyper: Hyper,
    pub seed: u64,
}

impl NonLinearProbe {
    /// Random `U(±1/√fan_in)` initialization.
    pub fn init(layer: usize, dim: usize, num_classes: usize, hyper: Hyper, seed: u64) -> Self {
        let mut rng = substream(seed, "nonlinear/init");
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let w: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-bound..bound) as f32).collect();
            let b: Vec<f32> = (0..rows).map(|_| rng.random_range(-bound..bound) as f32).collect();
            (Matrix::from_vec(rows, cols, w).expect("sized"), b)
        };
        let (hidden_weight, hidden_bias) = uniform(NONLINEAR_HIDDEN, dim);
        let (head_weight, head_bias) = uniform(num_classes, NONLINEAR_HIDDEN);
        Self {
            layer,
            hidden_weight,
            hidden_bias,
            head_weight,
            head_bias,
            hyper,
            seed,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden_weight.as_slice().len() + self.hidden_bias.len() + self.head_weight.as_slice().len() + self.head_bias.len()
    }

    pub fn logits(&self, features: &Matrix<f32>) -> Result<Matrix<f64>> {
        if features.cols() != self.hidden_weight.cols() {
            return Err(Error::shape("non-linear probe input", self.hidden_weight.cols(), features.cols()));
        }
        let k = self.head_bias.len();
        let mut hidden = alloc::vec![0.0f64; NONLINEAR_HIDDEN];
        let mut out = Matrix::zeros(features.rows(), k);
        for (i, x) in features.iter_rows().enumerate() {
            for (j, h) in hidden.iter_mut().enumerate() {
                let z = self.hidden_bias[j] as f64
                    + self.hidden_weight.row(j).iter().zip(x).map(|(w, v)| *w as f64 * *v as f64).sum::<f64>();
                *h = z.max(0.0);
            }
            for c in 0..k {
                out.row_mut(i)[c] = self.head_bias[c] as f64
                    + self.head_weight.row(c).iter().zip(&hidden).map(|(w, h)| *w as f64 * h).sum::<f64>();
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: &Matrix<f32>) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.iter_rows().map(argmax).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNonLinear {
    pub probe: NonLinearProbe,
    pub epoch_losses: Vec<f64>,
}

/// Trains a non-linear probe from `init` with the ILC loop (Adam, mean CE,
/// L1 on both weight matrices).
pub fn train_nonlinear_probe(
    features: &Matrix<f64>,
    labels: &[usize],
    init: NonLinearProbe,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainedNonLinear> {
    let n = features.rows();
    let d = features.cols();
    if n != labels.len() {
        return Err(Error::shape("probe labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if d != init.hidden_weight.cols() {
        return Err(Error::shape("non-linear probe input", init.hidden_weight.cols(), d));
    }
    let k = init.head_bias.len();
    check_labels(labels, k)?;
    let h = NONLINEAR_HIDDEN;
    let lambda = init.hyper.lambda;
    let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let mut params = [
        widen(init.hidden_weight.as_slice()),
        widen(&init.hidden_bias),
        widen(init.head_weight.as_slice()),
        widen(&init.head_bias),
    ];
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| alloc::vec![0.0; s]).collect();
    let mut opt = Adam::new(&sizes, init.hyper.eta, AdamConfig::default());
    let mut hidden = alloc::vec![0.0f64; h];
    let mut dhidden = alloc::vec![0.0f64; h];
    let mut logits = alloc::vec![0.0f64; k];
    let mut probs = alloc::vec![0.0f64; k];
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let order = epoch_order(n, init.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(batch_size.max(1)) {
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            let inv = 1.0 / batch.len() as f64;
            let mut ce = 0.0;
            for &i in batch {
                let x = features.row(i);
                let [hw, hb, ow, ob] = &params;
                for j in 0..h {
                    let z = hb[j] + hw[j * d..(j + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    hidden[j] = z.max(0.0);
                }
                for c in 0..k {
                    logits[c] = ob[c] + ow[c * h..(c + 1) * h].iter().zip(&hidden).map(|(a, v)| a * v).sum::<f64>();
                }
                ce += softmax_into(&logits, &mut probs) - logits[labels[i]];
                probs[labels[i]] -= 1.0;
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..k {
                    let coef = probs[c] * inv;
                    grads[3][c] += coef;
                    let row = &ow[c * h..(c + 1) * h];
                    for j in 0..h {
                        grads[2][c * h + j] += coef * hidden[j];
                        dhidden[j] += coef * row[j];
                    }
                }
                for j in 0..h {
                    if hidden[j] <= 0.0 || dhidden[j] == 0.0 {
                        continue;
                    }
                    grads[1][j] += dhidden[j];
                    for (g, v) in grads[0][j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += dhidden[j] * v;
                    }
                }
            }
            let l1: f64 = params[0].iter().chain(&params[2]).map(|v| v.abs()).sum();
            let loss = ce * inv + lambda * l1;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if lambda > 0.0 {
                for slot in [0, 2] {
                    for (g, &v) in grads[slot].iter_mut().zip(&params[slot]) {
                        if v > 0.0 {
                            *g += lambda;
                        } else if v < 0.0 {
                            *g -= lambda;
                        }
                    }
                }
            }
            opt.begin_step();
            for (slot, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
                opt.update(slot, p, g);
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let narrow = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
    let [hw, hb, ow, ob] = params;
    Ok(TrainedNonLinear {
        probe: NonLinearProbe {
            layer: init.layer,
            hidden_weight: Matrix::from_vec(h, d, narrow(&hw))?,
            hidden_bias: narrow(&hb),
            head_weight: Matrix::from_vec(k, h, narrow(&ow))?,
            head_bias: narrow(&ob),
            hyper: init.hyper,
            seed: init.seed,
        },
        epoch_losses,
    })
}

pub type NonLinearProbeSet = BTreeMap<usize, BTreeMap<ProbeKey, NonLinearProbe>>;

/// The ILC sweep with non-linear probes in place of affine ones.
pub fn train_nonlinear_probes<R: JobRunner>(
    features: &FeatureSet,
    layers: &[usize],
    grid: &HyperGrid,
    epochs: usize,
    seeds: &[u64],
    runner: &R,
) -> Result<NonLinearProbeSet> {
    grid.validate()?;
    check_labels(&features.labels, features.num_classes)?;
    let mut wide: BTreeMap<usize, Matrix<f64>> = BTreeMap::new();
    for &l in layers {
        wide.insert(l, features.layer(l)?.to_f64());
    }
    let mut jobs = Vec::new();
    for &layer in layers {
        for hyper in grid.configs() {
            for &seed in seeds {
                jobs.push(ProbeJob { layer, hyper, seed });
            }
        }
    }
    let results = runner.run(&jobs, |job| {
        let x = &wide[&job.layer];
        let init = NonLinearProbe::init(job.layer, x.cols(), features.num_classes, job.hyper, job.seed);
        train_nonlinear_probe(x, &features.labels, init, epochs, PROBE_BATCH_SIZE)
    });
    let mut out = NonLinearProbeSet::new();
    for r in results {
        let p = r?.probe;
        let key = ProbeKey {
            eta: p.hyper.eta,
            lambda: p.hyper.lambda,
            seed: p.seed,
        };
        out.entry(p.layer).or_default().insert(key, p);
    }
    Ok(out)
}
