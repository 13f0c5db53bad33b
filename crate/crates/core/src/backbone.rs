//! The frozen feature extractor: an MLP `f = f_L ∘ … ∘ f_1` whose last
//! layer is a linear classification head.
//!
//! Layers are indexed from 1. `r_l(x)` is the output of layer `l`, so the
//! representations available to probes are `r_1 … r_{L-1}`.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{Adam, AdamConfig};
use crate::real::{argmax, axpy, dot, softmax_into, Real};
use crate::rng::{indexed_substream, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// `relu(W a + b)`
    AffineRelu,
    /// `relu(a + W a + b)`; requires `in_dim == out_dim`.
    AffineResidualRelu,
    /// `W a + b`, the classification head.
    LinearHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn relu(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::AffineRelu,
            in_dim,
            out_dim,
        }
    }

    pub fn residual(dim: usize) -> Self {
        Self {
            kind: LayerKind::AffineResidualRelu,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn head(in_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: LayerKind::LinearHead,
            in_dim,
            out_dim: num_classes,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Plain MLP layout: `input → width` followed by `depth - 2` hidden layers of
/// `width` and a head. `residual` swaps the inner hidden layers for residual
/// blocks.
pub fn mlp_spec(input_dim: usize, width: usize, depth: usize, num_classes: usize, residual: bool) -> Vec<LayerSpec> {
    let mut spec = Vec::with_capacity(depth);
    spec.push(LayerSpec::relu(input_dim, width));
    for _ in 1..depth.saturating_sub(1) {
        spec.push(if residual {
            LayerSpec::residual(width)
        } else {
            LayerSpec::relu(width, width)
        });
    }
    spec.push(LayerSpec::head(width, num_classes));
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// `out_dim × in_dim`, row-major.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Layer<T> {
    /// Pre-activation `z = a Wᵀ + b` (plus `a` for residual layers).
    fn pre_activation(&self, a: &Matrix<T>) -> Matrix<T> {
        let n = a.rows();
        let out_dim = self.spec.out_dim;
        let mut z = Matrix::zeros(n, out_dim);
        for i in 0..n {
            let ai = a.row(i);
            let zi = z.row_mut(i);
            for (j, zij) in zi.iter_mut().enumerate() {
                *zij = dot(self.weight.row(j), ai) + self.bias[j];
            }
            if self.spec.kind == LayerKind::AffineResidualRelu {
                for (zij, &aij) in zi.iter_mut().zip(ai) {
                    *zij += aij;
                }
            }
        }
        z
    }

    fn activate(&self, mut z: Matrix<T>) -> Matrix<T> {
        if self.spec.kind != LayerKind::LinearHead {
            for v in z.as_mut_slice() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        z
    }

    pub fn apply(&self, a: &Matrix<T>) -> Result<Matrix<T>> {
        if a.cols() != self.spec.in_dim {
            return Err(Error::shape("layer input", self.spec.in_dim, a.cols()));
        }
        Ok(self.activate(self.pre_activation(a)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone<T = f32> {
    layers: Vec<Layer<T>>,
    num_classes: usize,
    frozen: bool,
    init_seed: u64,
    train_seed: Option<u64>,
}

/// Layer-`l` representations of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBatch<T = f32> {
    pub layer: usize,
    pub matrix: Matrix<T>,
    pub sample_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T = f32> {
    /// `representations[l - 1]` holds `r_l` for `l = 1..L-1`.
    pub representations: Vec<RepresentationBatch<T>>,
    pub logits: Matrix<T>,
}

/// Per-parameter gradients laid out like the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

pub fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.len() < 3 {
        return Err(Error::InvalidSpec(format!("need at least 3 layers, got {}", spec.len())));
    }
    for (i, s) in spec.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidSpec(format!("layer {} has a zero dimension", i + 1)));
        }
        if s.kind == LayerKind::AffineResidualRelu && s.in_dim != s.out_dim {
            return Err(Error::InvalidSpec(format!(
                "residual layer {} maps {} -> {}",
                i + 1,
                s.in_dim,
                s.out_dim
            )));
        }
        let is_last = i + 1 == spec.len();
        if (s.kind == LayerKind::LinearHead) != is_last {
            return Err(Error::InvalidSpec("exactly one linear head is required, in the last position".into()));
        }
        if i > 0 && spec[i - 1].out_dim != s.in_dim {
            return Err(Error::InvalidSpec(format!(
                "layer {} outputs {} but layer {} expects {}",
                i,
                spec[i - 1].out_dim,
                i + 1,
                s.in_dim
            )));
        }
    }
    Ok(())
}

/// Initializes a backbone with `U(-1/√fan_in, 1/√fan_in)` weights and biases.
pub fn build_backbone(spec: &[LayerSpec], init_seed: u64) -> Result<Backbone<f32>> {
    validate_spec(spec)?;
    let mut rng = substream(init_seed, "backbone/init");
    let layers = spec
        .iter()
        .map(|s| {
            let bound = 1.0 / (s.in_dim as f64).sqrt();
            let mut weight = Matrix::zeros(s.out_dim, s.in_dim);
            for w in weight.as_mut_slice() {
                *w = rng.random_range(-bound..bound) as f32;
            }
            let bias = (0..s.out_dim).map(|_| rng.random_range(-bound..bound) as f32).collect();
            Layer {
                spec: *s,
                weight,
                bias,
            }
        })
        .collect();
    Ok(Backbone {
        layers,
        num_classes: spec[spec.len() - 1].out_dim,
        frozen: false,
        init_seed,
        train_seed: None,
    })
}

impl<T: Real> Backbone<T> {
    /// Reassembles a backbone from stored layers (e.g. a checkpoint).
    pub fn from_layers(layers: Vec<Layer<T>>, frozen: bool, init_seed: u64, train_seed: Option<u64>) -> Result<Self> {
        let spec: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_spec(&spec)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != l.spec.out_dim || l.weight.cols() != l.spec.in_dim {
                return Err(Error::shape("layer weight", l.spec.in_dim * l.spec.out_dim, l.weight.as_slice().len()));
            }
            if l.bias.len() != l.spec.out_dim {
                return Err(Error::InvalidSpec(format!("layer {} bias length mismatch", i + 1)));
            }
        }
        Ok(Self {
            num_classes: spec[spec.len() - 1].out_dim,
            layers,
            frozen,
            init_seed,
            train_seed,
        })
    }

    /// Total number of layers `L`, head included.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// `d_l` for the representation layers `1..L-1`.
    pub fn representation_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.spec.out_dim).collect()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn train_seed(&self) -> Option<u64> {
        self.train_seed
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.num_params()).sum()
    }

    /// Mutable access to the layers; rejected once frozen.
    pub fn layers_mut(&mut self) -> Result<&mut [Layer<T>]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.layers)
    }

    /// Overwrites one parameter. `index` runs over the layer's weights
    /// (row-major) followed by its biases.
    pub fn set_parameter(&mut self, layer: usize, index: usize, value: T) -> Result<()> {
        let layers = self.layers_mut()?;
        let l = layers.get_mut(layer.wrapping_sub(1)).ok_or(Error::MissingLayer(layer))?;
        let nw = l.weight.as_slice().len();
        if index < nw {
            l.weight.as_mut_slice()[index] = value;
        } else if index < nw + l.bias.len() {
            l.bias[index - nw] = value;
        } else {
            return Err(Error::shape("parameter index", nw + l.bias.len(), index));
        }
        Ok(())
    }

    pub fn parameter(&self, layer: usize, index: usize) -> Option<T> {
        let l = self.layers.get(layer.wrapping_sub(1))?;
        let nw = l.weight.as_slice().len();
        if index < nw {
            Some(l.weight.as_slice()[index])
        } else {
            l.bias.get(index - nw).copied()
        }
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.map(|v| U::of(v.f64())),
                    bias: l.bias.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            num_classes: self.num_classes,
            frozen: self.frozen,
            init_seed: self.init_seed,
            train_seed: self.train_seed,
        }
    }

    /// Applies layer `l` (1-based) to its input.
    pub fn apply_layer(&self, l: usize, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.layers.get(l.wrapping_sub(1)).ok_or(Error::MissingLayer(l))?.apply(input)
    }

    /// All intermediate representations plus the head's logits.
    pub fn forward_collect(&self, x: &Matrix<T>, sample_ids: &[u64]) -> Result<ForwardOutput<T>> {
        if sample_ids.len() != x.rows() {
            return Err(Error::shape("forward_collect sample ids", x.rows(), sample_ids.len()));
        }
        let mut reps = Vec::with_capacity(self.layers.len() - 1);
        let mut a = self.layers[0].apply(x)?;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let next = layer.apply(&a)?;
            reps.push(RepresentationBatch {
                layer: i,
                matrix: a,
                sample_ids: sample_ids.to_vec(),
            });
            a = next;
        }
        Ok(ForwardOutput {
            representations: reps,
            logits: a,
        })
    }

    /// Computes `r_upto` by evaluating layers `1..=upto` only. Returns the
    /// representation and the number of layers evaluated.
    pub fn forward_truncated(&self, x: &Matrix<T>, upto: usize) -> Result<(Matrix<T>, usize)> {
        if upto == 0 || upto > self.layers.len() {
            return Err(Error::MissingLayer(upto));
        }
        let mut a = self.layers[0].apply(x)?;
        let mut evaluated = 1;
        for layer in &self.layers[1..upto] {
            a = layer.apply(&a)?;
            evaluated += 1;
        }
        Ok((a, evaluated))
    }

    /// Head logits from penultimate representations `r_{L-1}`.
    pub fn head_logits(&self, penultimate: &Matrix<T>) -> Result<Matrix<T>> {
        self.layers[self.layers.len() - 1].apply(penultimate)
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_truncated(x, self.layers.len())?.0)
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_gradients(&self, x: &Matrix<T>, labels: &[usize]) -> Result<(T, Gradients<T>)> {
        if labels.len() != x.rows() {
            return Err(Error::shape("labels", x.rows(), labels.len()));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::shape("backbone input", self.input_dim(), x.cols()));
        }
        let n = x.rows();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let k = self.num_classes;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} outside 0..{k}")));
        }
        // Forward pass, keeping inputs and pre-activations of every layer.
        let mut inputs: Vec<Matrix<T>> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Matrix<T>> = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&a);
            let out = layer.activate(z.clone());
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let logits = a;

        let inv_n = T::one() / T::of(n as f64);
        let mut loss = T::zero();
        let mut delta = Matrix::zeros(n, k);
        let mut probs = alloc::vec![T::zero(); k];
        for i in 0..n {
            let lse = softmax_into(logits.row(i), &mut probs);
            loss += lse - logits.get(i, labels[i]);
            let d = delta.row_mut(i);
            for c in 0..k {
                d[c] = probs[c] * inv_n;
            }
            d[labels[i]] -= inv_n;
        }
        loss *= inv_n;

        let mut gw: Vec<Matrix<T>> = Vec::with_capacity(self.layers.len());
        let mut gb: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let spec = layer.spec;
            // `delta` holds dL/d(output); turn it into dL/dz.
            if spec.kind != LayerKind::LinearHead {
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre[li].as_slice()) {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let a_in = &inputs[li];
            let mut dw = Matrix::zeros(spec.out_dim, spec.in_dim);
            let mut db = alloc::vec![T::zero(); spec.out_dim];
            let mut da = Matrix::zeros(n, spec.in_dim);
            for i in 0..n {
                let di = delta.row(i);
                let ai = a_in.row(i);
                for (j, &dij) in di.iter().enumerate() {
                    if dij == T::zero() {
                        continue;
                    }
                    db[j] += dij;
                    axpy(dij, ai, dw.row_mut(j));
                    axpy(dij, layer.weight.row(j), da.row_mut(i));
                }
                if spec.kind == LayerKind::AffineResidualRelu {
                    for (x, &d) in da.row_mut(i).iter_mut().zip(di) {
                        *x += d;
                    }
                }
            }
            gw.push(dw);
            gb.push(db);
            delta = da;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        ))
    }

    pub fn loss(&self, x: &Matrix<T>, labels: &[usize]) -> Result<T> {
        let logits = self.logits(x)?;
        let mut probs = alloc::vec![T::zero(); self.num_classes];
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let lse = softmax_into(logits.row(i), &mut probs);
            loss += lse - logits.get(i, y);
        }
        Ok(loss / T::of(labels.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainReport {
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Trains the backbone with Adam on mean cross-entropy and returns it frozen.
pub fn train_backbone(
    mut backbone: Backbone<f32>,
    x: &Matrix<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &BackboneTrainConfig,
) -> Result<(Backbone<f32>, BackboneTrainReport)> {
    if backbone.frozen {
        return Err(Error::Frozen);
    }
    if num_classes != backbone.num_classes {
        return Err(Error::shape("backbone classes", backbone.num_classes, num_classes));
    }
    if x.rows() != labels.len() {
        return Err(Error::shape("training labels", x.rows(), labels.len()));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch_size and lr must be positive"));
    }
    let sizes: Vec<usize> = backbone
        .layers
        .iter()
        .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
        .collect();
    let mut opt = Adam::new(&sizes, cfg.lr, cfg.adam.clone());
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = indexed_substream(cfg.seed, "backbone/order", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = backbone.loss_and_gradients(&xb, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss as f64;
            batches += 1;
            opt.begin_step();
            for (li, layer) in backbone.layers.iter_mut().enumerate() {
                opt.update(2 * li, layer.weight.as_mut_slice(), grads.weights[li].as_slice());
                opt.update(2 * li + 1, &mut layer.bias, &grads.biases[li]);
            }
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epoch_losses.push(mean);
    }
    if backbone
        .layers
        .iter()
        .any(|l| l.weight.as_slice().iter().chain(&l.bias).any(|v| !v.is_finite()))
    {
        return Err(Error::Divergence { epoch: cfg.epochs });
    }
    let preds = backbone.predict(x)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    backbone.train_seed = Some(cfg.seed);
    backbone.freeze();
    Ok((
        backbone,
        BackboneTrainReport {
            epoch_losses,
            final_train_accuracy: correct as f64 / labels.len() as f64,
        },
    ))
}

/// Largest relative error between backprop and central differences over
/// `num_coords` randomly sampled parameters, evaluated in `f64`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn gradient_check<T: Real>(
    backbone: &Backbone<T>,
    x: &Matrix<f32>,
    labels: &[usize],
    epsilon: f64,
    num_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let mut probe: Backbone<f64> = backbone.cast();
    probe.frozen = false;
    let x64 = x.to_f64();
    let (_, grads) = probe.loss_and_gradients(&x64, labels)?;
    let mut rng = substream(seed, "gradient-check");
    let total = probe.num_params();
    let mut worst: f64 = 0.0;
    for _ in 0..num_coords {
        // Uniform over all parameters.
        let mut flat = rng.random_range(0..total);
        let mut layer = 0;
        while flat >= probe.layers[layer].spec.num_params() {
            flat -= probe.layers[layer].spec.num_params();
            layer += 1;
        }
        let nw = probe.layers[layer].weight.as_slice().len();
        let analytic = if flat < nw {
            grads.weights[layer].as_slice()[flat]
        } else {
            grads.biases[layer][flat - nw]
        };
        let orig = probe.parameter(layer + 1, flat).expect("sampled index in range");
        probe.set_parameter(layer + 1, flat, orig + epsilon)?;
        let plus = probe.loss(&x64, labels)?;
        probe.set_parameter(layer + 1, flat, orig - epsilon)?;
        let minus = probe.loss(&x64, labels)?;
        probe.set_parameter(layer + 1, flat, orig)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
