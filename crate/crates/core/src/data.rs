//! Synthetic ID/OOD dataset pairs and split construction.
//!
//! Three shift families are generated:
//! - conditional: a one-hot "color" block agrees with the (noisy) label with
//!   probability `corr` in-distribution and 0.5 out-of-distribution, while a
//!   block of Gaussian "digit" clusters carries the true label;
//! - subpopulation: (class, attribute) groups whose proportions are
//!   imbalanced in-distribution and balanced out of it; the attribute is
//!   either a mean offset or an XOR of two signs;
//! - input noise: a copy of a base set with perturbed inputs.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, StageRng};

/// Offset added to sample ids of out-of-distribution draws so that ID and OOD
/// samples never share an identity.
pub const OOD_ID_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistTag {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftKind {
    Conditional,
    Subpopulation,
    InputNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f32>,
    pub y: usize,
    pub g: usize,
    pub tag: DistTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub seed: u64,
    pub shift_kind: ShiftKind,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Matrix<f32> {
        let mut data = Vec::with_capacity(self.len() * self.input_dim);
        for s in &self.samples {
            data.extend_from_slice(&s.x);
        }
        Matrix::from_vec(self.len(), self.input_dim, data).expect("samples share input_dim")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.g).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn tags(&self) -> Vec<DistTag> {
        self.samples.iter().map(|s| s.tag).collect()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_groups];
        for s in &self.samples {
            counts[s.g] += 1;
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    /// Copy of this dataset restricted to the given sample positions.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Self {
        Self {
            samples: Vec::new(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            num_groups: self.num_groups,
            seed: self.seed,
            shift_kind: self.shift_kind,
        }
    }

    /// Checks the structural invariants of a dataset.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.num_groups == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        for s in &self.samples {
            if s.x.len() != self.input_dim {
                return Err(Error::shape("LabeledDataset sample", self.input_dim, s.x.len()));
            }
            if s.y >= self.num_classes || s.g >= self.num_groups {
                return Err(Error::invalid(format!("sample {} has out-of-range label/group", s.id)));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {} has non-finite features", s.id)));
            }
        }
        if let Some(c) = self.class_counts().iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(c));
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

// ---------------------------------------------------------------------------
// Conditional shift
// ---------------------------------------------------------------------------

/// Shape of the colored-digit analog. Defaults give 24 core + 8 color inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionalGeometry {
    pub core_dim: usize,
    pub num_colors: usize,
    pub num_digits: usize,
    /// Standard deviation of digit prototype coordinates.
    pub prototype_scale: f64,
    /// Within-digit Gaussian noise.
    pub core_noise: f64,
    /// Value of the active color coordinate.
    pub color_scale: f64,
}

impl Default for ConditionalGeometry {
    fn default() -> Self {
        Self {
            core_dim: 24,
            num_colors: 8,
            num_digits: 10,
            prototype_scale: 1.0,
            core_noise: 0.6,
            color_scale: 1.0,
        }
    }
}

impl ConditionalGeometry {
    pub fn input_dim(&self) -> usize {
        self.core_dim + self.num_colors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionalShiftParams {
    pub n_train: usize,
    pub n_test: usize,
    pub corr: f64,
    pub label_noise: f64,
    #[serde(default)]
    pub geometry: ConditionalGeometry,
}

impl Default for ConditionalShiftParams {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 2000,
            corr: 0.9,
            label_noise: 0.25,
            geometry: ConditionalGeometry::default(),
        }
    }
}

impl ConditionalShiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.corr > 0.5 && self.corr <= 1.0) {
            return Err(Error::invalid(format!("corr must lie in (0.5, 1], got {}", self.corr)));
        }
        if !(self.label_noise >= 0.0 && self.label_noise < 0.5) {
            return Err(Error::invalid(format!(
                "label_noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be positive"));
        }
        let g = &self.geometry;
        if g.core_dim == 0 || g.num_colors < 2 || g.num_colors % 2 != 0 || g.num_digits < 2 {
            return Err(Error::invalid(
                "geometry needs core_dim > 0, an even number of colors and at least 2 digits",
            ));
        }
        if !(g.core_noise >= 0.0 && g.prototype_scale > 0.0 && g.color_scale > 0.0) {
            return Err(Error::invalid("geometry scales must be positive"));
        }
        Ok(())
    }
}

/// Group index of a conditional-shift sample: `2 * label + agrees`.
pub fn conditional_group(label: usize, color_agrees: bool) -> usize {
    2 * label + color_agrees as usize
}

/// Binary colored-digit analog with a spurious color block.
///
/// Digits are Gaussian clusters around random prototypes in the core block;
/// the true label is `digit >= num_digits / 2`. The observed label flips the
/// true label with probability `label_noise`. The color block is one-hot; its
/// color belongs to the observed label's half of the palette with probability
/// `corr` (ID) or 0.5 (OOD).
pub fn gen_conditional_shift(
    params: &ConditionalShiftParams,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    params.validate()?;
    let mut id_rng = substream(seed, "conditional/id");
    let mut ood_rng = substream(seed, "conditional/ood");
    let id = conditional_draw(params, seed, params.n_train, params.corr, DistTag::Id, 0, &mut id_rng);
    let ood = conditional_draw(params, seed, params.n_test, 0.5, DistTag::Ood, OOD_ID_OFFSET, &mut ood_rng);
    id.validate()?;
    ood.validate()?;
    Ok((id, ood))
}

/// Offset of sample ids in [`gen_conditional_id_holdout`].
pub const HOLDOUT_ID_OFFSET: u64 = 2 << 32;

/// Fresh in-distribution samples sharing the prototypes of
/// [`gen_conditional_shift`] with the same seed, disjoint from its ID set.
pub fn gen_conditional_id_holdout(params: &ConditionalShiftParams, seed: u64, n: usize) -> Result<LabeledDataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = substream(seed, "conditional/id-holdout");
    let ds = conditional_draw(params, seed, n, params.corr, DistTag::Id, HOLDOUT_ID_OFFSET, &mut rng);
    ds.validate()?;
    Ok(ds)
}

fn conditional_draw(
    params: &ConditionalShiftParams,
    seed: u64,
    n: usize,
    agree_p: f64,
    tag: DistTag,
    base_id: u64,
    rng: &mut StageRng,
) -> LabeledDataset {
    let geom = &params.geometry;
    let mut proto_rng = substream(seed, "conditional/prototypes");
    let proto = normal(geom.prototype_scale);
    let prototypes: Vec<Vec<f64>> = (0..geom.num_digits)
        .map(|_| (0..geom.core_dim).map(|_| proto.sample(&mut proto_rng)).collect())
        .collect();

    let noise = normal(geom.core_noise);
    let half = geom.num_colors / 2;
    let samples = (0..n)
            .map(|i| {
                let digit = rng.random_range(0..geom.num_digits);
                let true_label = (digit >= geom.num_digits / 2) as usize;
                let y = if rng.random_bool(params.label_noise) {
                    1 - true_label
                } else {
                    true_label
                };
                let agrees = rng.random_bool(agree_p);
                let color_class = if agrees { y } else { 1 - y };
                let color = color_class * half + rng.random_range(0..half);
                let mut x = Vec::with_capacity(geom.input_dim());
                for &p in &prototypes[digit] {
                    x.push((p + noise.sample(rng)) as f32);
                }
                for c in 0..geom.num_colors {
                    x.push(if c == color { geom.color_scale as f32 } else { 0.0 });
                }
                Sample {
                    id: base_id + i as u64,
                    x,
                    y,
                    g: conditional_group(y, agrees),
                    tag,
                }
            })
            .collect();
    LabeledDataset {
        samples,
        input_dim: geom.input_dim(),
        num_classes: 2,
        num_groups: 4,
        seed,
        shift_kind: ShiftKind::Conditional,
    }
}

/// Whether a conditional-shift sample's color agrees with its label.
pub fn color_agrees(sample: &Sample) -> bool {
    sample.g % 2 == 1
}

// ---------------------------------------------------------------------------
// Subpopulation shift
// ---------------------------------------------------------------------------

/// A subpopulation: the class it belongs to and its nuisance attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDef {
    pub class: usize,
    pub attr: usize,
}

/// How the nuisance attribute shows up in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrEncoding {
    /// Each attribute value has its own mean in the attribute block.
    Mean,
    /// The first two attribute coordinates are `±attr_sep` with random
    /// signs; the attribute is whether the signs agree (attr 0) or not.
    /// Only two attribute values are allowed and the block mean is zero.
    Xor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubpopGeometry {
    pub input_dim: usize,
    /// Coordinates `[0, core_dim)` carry the class.
    pub core_dim: usize,
    /// Coordinates `[core_dim, core_dim + attr_dim)` carry the attribute.
    pub attr_dim: usize,
    /// Distance scale between class means.
    pub core_sep: f64,
    /// Distance scale of the attribute signal.
    pub attr_sep: f64,
    /// Within-group noise outside the attribute block.
    pub noise_std: f64,
    /// Within-group noise inside the attribute block.
    pub attr_noise_std: f64,
    pub attr_encoding: AttrEncoding,
}

impl Default for SubpopGeometry {
    fn default() -> Self {
        Self {
            input_dim: 32,
            core_dim: 8,
            attr_dim: 8,
            core_sep: 1.5,
            attr_sep: 2.0,
            noise_std: 1.0,
            attr_noise_std: 0.5,
            attr_encoding: AttrEncoding::Xor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubpopShiftParams {
    pub n_per_group: Vec<usize>,
    pub groups: Vec<GroupDef>,
    pub n_test_per_group: usize,
    #[serde(default)]
    pub geometry: SubpopGeometry,
}

impl Default for SubpopShiftParams {
    /// Waterbirds-like layout: two majority groups where the attribute
    /// matches the class and two small minority groups where it does not.
    fn default() -> Self {
        Self {
            n_per_group: alloc::vec![1000, 1000, 50, 50],
            groups: alloc::vec![
                GroupDef { class: 0, attr: 0 },
                GroupDef { class: 1, attr: 1 },
                GroupDef { class: 0, attr: 1 },
                GroupDef { class: 1, attr: 0 },
            ],
            n_test_per_group: 2000,
            geometry: SubpopGeometry::default(),
        }
    }
}

impl SubpopShiftParams {
    pub fn num_classes(&self) -> usize {
        self.groups.iter().map(|g| g.class + 1).max().unwrap_or(0)
    }

    pub fn num_attrs(&self) -> usize {
        self.groups.iter().map(|g| g.attr + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(Error::invalid("need at least 2 groups"));
        }
        if self.n_per_group.len() != self.groups.len() {
            return Err(Error::invalid(format!(
                "n_per_group has {} entries for {} groups",
                self.n_per_group.len(),
                self.groups.len()
            )));
        }
        if let Some(g) = self.n_per_group.iter().position(|&n| n == 0) {
            return Err(Error::EmptyGroup(g));
        }
        if self.n_test_per_group == 0 {
            return Err(Error::invalid("n_test_per_group must be positive"));
        }
        let k = self.num_classes();
        if k < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let classes: BTreeSet<usize> = self.groups.iter().map(|g| g.class).collect();
        if classes.len() != k {
            return Err(Error::invalid("group_class_map must cover classes 0..K without gaps"));
        }
        let pairs: BTreeSet<(usize, usize)> = self.groups.iter().map(|g| (g.class, g.attr)).collect();
        if pairs.len() != self.groups.len() {
            return Err(Error::invalid("group_class_map repeats a (class, attr) pair"));
        }
        let g = &self.geometry;
        if g.core_dim == 0 || g.attr_dim == 0 || g.core_dim + g.attr_dim > g.input_dim {
            return Err(Error::invalid("geometry blocks do not fit in input_dim"));
        }
        if !(g.noise_std >= 0.0 && g.attr_noise_std >= 0.0 && g.core_sep > 0.0 && g.attr_sep > 0.0) {
            return Err(Error::invalid("geometry scales must be positive"));
        }
        if g.attr_encoding == AttrEncoding::Xor && (g.attr_dim < 2 || self.num_attrs() > 2) {
            return Err(Error::invalid("xor attribute encoding needs attr_dim >= 2 and at most 2 attributes"));
        }
        Ok(())
    }
}

/// Exact mean of each group. Under the XOR encoding the attribute block
/// averages to zero, so groups of one class share a mean.
pub fn subpop_group_means(params: &SubpopShiftParams, seed: u64) -> Vec<Vec<f64>> {
    let g = &params.geometry;
    let mut rng = substream(seed, "subpop/prototypes");
    let unit = |dim: usize, rng: &mut StageRng| -> Vec<f64> {
        let n = normal(1.0);
        let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / norm).collect()
    };
    let class_dirs: Vec<Vec<f64>> = (0..params.num_classes()).map(|_| unit(g.core_dim, &mut rng)).collect();
    let attr_dirs: Vec<Vec<f64>> = (0..params.num_attrs()).map(|_| unit(g.attr_dim, &mut rng)).collect();
    params
        .groups
        .iter()
        .map(|gd| {
            let mut m = alloc::vec![0.0; g.input_dim];
            for (i, v) in class_dirs[gd.class].iter().enumerate() {
                m[i] = g.core_sep * v;
            }
            if g.attr_encoding == AttrEncoding::Mean {
                for (i, v) in attr_dirs[gd.attr].iter().enumerate() {
                    m[g.core_dim + i] = g.attr_sep * v;
                }
            }
            m
        })
        .collect()
}

/// Imbalanced ID set with exactly `n_per_group` samples per group and a
/// balanced OOD set with `n_test_per_group` samples per group.
pub fn gen_subpopulation_shift(
    params: &SubpopShiftParams,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    params.validate()?;
    let means = subpop_group_means(params, seed);
    let geo = &params.geometry;
    let noise = normal(geo.noise_std);
    let attr_noise = normal(geo.attr_noise_std);
    let attr_block = geo.core_dim..geo.core_dim + geo.attr_dim;
    let draw = |counts: &[usize], tag: DistTag, rng: &mut StageRng| -> Vec<Sample> {
        let base_id = match tag {
            DistTag::Id => 0,
            DistTag::Ood => OOD_ID_OFFSET,
        };
        let mut out = Vec::with_capacity(counts.iter().sum());
        for (g, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut x: Vec<f64> = means[g]
                    .iter()
                    .enumerate()
                    .map(|(i, m)| m + if attr_block.contains(&i) { attr_noise.sample(rng) } else { noise.sample(rng) })
                    .collect();
                if geo.attr_encoding == AttrEncoding::Xor {
                    let s1 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let s2 = if params.groups[g].attr == 0 { s1 } else { -s1 };
                    x[geo.core_dim] += s1 * geo.attr_sep;
                    x[geo.core_dim + 1] += s2 * geo.attr_sep;
                }
                let x = x.into_iter().map(|v| v as f32).collect();
                out.push(Sample {
                    id: 0,
                    x,
                    y: params.groups[g].class,
                    g,
                    tag,
                });
            }
        }
        out.shuffle(rng);
        for (i, s) in out.iter_mut().enumerate() {
            s.id = base_id + i as u64;
        }
        out
    };
    let make = |samples| LabeledDataset {
        samples,
        input_dim: params.geometry.input_dim,
        num_classes: params.num_classes(),
        num_groups: params.groups.len(),
        seed,
        shift_kind: ShiftKind::Subpopulation,
    };
    let mut id_rng = substream(seed, "subpop/id");
    let mut ood_rng = substream(seed, "subpop/ood");
    let test_counts = alloc::vec![params.n_test_per_group; params.groups.len()];
    let id = make(draw(&params.n_per_group, DistTag::Id, &mut id_rng));
    let ood = make(draw(&test_counts, DistTag::Ood, &mut ood_rng));
    id.validate()?;
    ood.validate()?;
    Ok((id, ood))
}

// ---------------------------------------------------------------------------
// Input noise
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Additive N(0, severity²).
    Gaussian,
    /// Additive U(-severity, severity).
    Uniform,
    /// Each coordinate zeroed with probability `severity`.
    Mask,
}

impl core::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "Gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" | "Uniform" => Ok(NoiseKind::Uniform),
            "mask" | "Mask" => Ok(NoiseKind::Mask),
            other => Err(Error::invalid(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Perturbed OOD copy of `base`; labels and groups are untouched.
pub fn gen_input_noise_shift(
    base: &LabeledDataset,
    kind: NoiseKind,
    severity: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(severity >= 0.0 && severity.is_finite()) {
        return Err(Error::invalid(format!("severity must be finite and >= 0, got {severity}")));
    }
    if kind == NoiseKind::Mask && severity > 1.0 {
        return Err(Error::invalid("mask severity is a probability and must be <= 1"));
    }
    if base.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = substream(seed, "input-noise");
    let mut out = base.clone();
    out.shift_kind = ShiftKind::InputNoise;
    for s in &mut out.samples {
        s.tag = DistTag::Ood;
        if severity == 0.0 {
            continue;
        }
        match kind {
            NoiseKind::Gaussian => {
                let n = normal(severity);
                for v in &mut s.x {
                    *v = (*v as f64 + n.sample(&mut rng)) as f32;
                }
            }
            NoiseKind::Uniform => {
                for v in &mut s.x {
                    *v = (*v as f64 + rng.random_range(-severity..=severity)) as f32;
                }
            }
            NoiseKind::Mask => {
                for v in &mut s.x {
                    if rng.random_bool(severity) {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Balanced clean dataset pair used as the base of an input-noise shift:
/// ID and OOD are independent draws from the same clusters, and the OOD
/// draw is then perturbed.
pub fn gen_input_noise_pair(
    base: &SubpopShiftParams,
    kind: NoiseKind,
    severity: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut id, clean_ood) = gen_subpopulation_shift(base, seed)?;
    id.shift_kind = ShiftKind::InputNoise;
    let ood = gen_input_noise_shift(&clean_ood, kind, severity, seed)?;
    Ok((id, ood))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub train: LabeledDataset,
    pub probe: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: LabeledDataset,
    pub scenario: Scenario,
    pub pi: Option<f64>,
}

impl SplitBundle {
    /// Checks the ID/OOD placement and disjointness contracts.
    pub fn validate(&self) -> Result<()> {
        let want = match self.scenario {
            Scenario::ZeroShot => DistTag::Id,
            Scenario::FewShot => DistTag::Ood,
        };
        if self.probe.samples.iter().any(|s| s.tag != want) {
            return Err(Error::ProtocolViolation(format!(
                "{:?} probe split contains samples tagged other than {want:?}",
                self.scenario
            )));
        }
        let test_ids: BTreeSet<u64> = self.test.samples.iter().map(|s| s.id).collect();
        if self.probe.samples.iter().any(|s| test_ids.contains(&s.id)) {
            return Err(Error::ProtocolViolation("probe and test splits share samples".into()));
        }
        let oracle = self.scenario == Scenario::FewShot && self.pi == Some(1.0);
        if !oracle && self.valid.samples.iter().any(|s| test_ids.contains(&s.id)) {
            return Err(Error::ProtocolViolation("valid and test splits share samples".into()));
        }
        Ok(())
    }
}

/// Builds train/probe/valid/test.
///
/// Zero-shot: probe is the train set; OOD is halved into valid and test.
/// Few-shot: OOD is halved into a candidate pool and test; probe takes
/// `floor(pi * |candidate|)` uniformly drawn candidates and valid the rest.
/// `pi = 1` is oracle mode: probe is the whole pool and valid is test.
pub fn make_splits(
    id_set: &LabeledDataset,
    ood_set: &LabeledDataset,
    scenario: Scenario,
    pi: Option<f64>,
    seed: u64,
) -> Result<SplitBundle> {
    if id_set.is_empty() || ood_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = substream(seed, "splits");
    let mut ood_idx: Vec<usize> = (0..ood_set.len()).collect();
    ood_idx.shuffle(&mut rng);
    let half = ood_idx.len() / 2;
    let (first, second) = ood_idx.split_at(half);
    let bundle = match (scenario, pi) {
        (Scenario::ZeroShot, None) => SplitBundle {
            train: id_set.clone(),
            probe: id_set.clone(),
            valid: ood_set.subset(first),
            test: ood_set.subset(second),
            scenario,
            pi,
        },
        (Scenario::ZeroShot, Some(_)) => {
            return Err(Error::invalid("pi must be absent in the zero-shot scenario"));
        }
        (Scenario::FewShot, None) => {
            return Err(Error::invalid("pi is required in the few-shot scenario"));
        }
        (Scenario::FewShot, Some(p)) => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("pi must lie in (0, 1], got {p}")));
            }
            let candidate = first;
            let test = ood_set.subset(second);
            if p == 1.0 {
                SplitBundle {
                    train: id_set.clone(),
                    probe: ood_set.subset(candidate),
                    valid: test.clone(),
                    test,
                    scenario,
                    pi,
                }
            } else {
                // Truncation is floor for non-negative values.
                let m = (p * candidate.len() as f64) as usize;
                if m < ood_set.num_classes {
                    return Err(Error::invalid(format!(
                        "pi = {p} leaves {m} probe samples, fewer than the {} classes",
                        ood_set.num_classes
                    )));
                }
                let mut cand: Vec<usize> = candidate.to_vec();
                cand.shuffle(&mut rng);
                let (probe, valid) = cand.split_at(m);
                SplitBundle {
                    train: id_set.clone(),
                    probe: ood_set.subset(probe),
                    valid: ood_set.subset(valid),
                    test,
                    scenario,
                    pi,
                }
            }
        }
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Subsamples every group to the size of the smallest one, uniformly
/// without replacement. Kept samples retain their original order.
pub fn balance_groups(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let counts = ds.group_counts();
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(g));
    }
    let target = counts.iter().copied().min().unwrap_or(0);
    let mut rng = substream(seed, "balance-groups");
    let mut keep = alloc::vec![false; ds.len()];
    for g in 0..ds.num_groups {
        let mut members: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.g == g)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..target] {
            keep[i] = true;
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.subset(&idx))
}
