use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::Backbone;
use crate::data::{DistTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-layer feature matrices of one data split, plus its labels.
///
/// Layer 0 (when present) is the raw input; layers `1..L-1` are backbone
/// representations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    pub layers: BTreeMap<usize, Matrix<f32>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub sample_ids: Vec<u64>,
    pub tags: Vec<DistTag>,
    pub num_classes: usize,
    pub num_groups: usize,
}

impl FeatureSet {
    /// Runs `ds` through the backbone and keeps `r_1 … r_{L-1}`.
    pub fn extract(name: &str, backbone: &Backbone<f32>, ds: &LabeledDataset) -> Result<Self> {
        let ids = ds.ids();
        let out = backbone.forward_collect(&ds.features(), &ids)?;
        let layers = out.representations.into_iter().map(|r| (r.layer, r.matrix)).collect();
        Ok(Self {
            name: name.into(),
            layers,
            labels: ds.labels(),
            groups: ds.groups(),
            sample_ids: ids,
            tags: ds.tags(),
            num_classes: ds.num_classes,
            num_groups: ds.num_groups,
        })
    }

    /// Raw inputs as the single layer 0.
    pub fn raw(name: &str, ds: &LabeledDataset) -> Self {
        let mut layers = BTreeMap::new();
        layers.insert(0, ds.features());
        Self {
            name: name.into(),
            layers,
            labels: ds.labels(),
            groups: ds.groups(),
            sample_ids: ds.ids(),
            tags: ds.tags(),
            num_classes: ds.num_classes,
            num_groups: ds.num_groups,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn layer(&self, l: usize) -> Result<&Matrix<f32>> {
        self.layers.get(&l).ok_or(Error::MissingLayer(l))
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn count_tag(&self, tag: DistTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn group_indices(&self, g: usize) -> Vec<usize> {
        self.groups.iter().enumerate().filter(|(_, &x)| x == g).map(|(i, _)| i).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            layers: self.layers.iter().map(|(&l, m)| (l, m.select_rows(idx))).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
            tags: idx.iter().map(|&i| self.tags[i]).collect(),
            num_classes: self.num_classes,
            num_groups: self.num_groups,
        }
    }

    /// Checks that every per-sample vector and layer matrix agrees in length.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        for len in [self.groups.len(), self.sample_ids.len(), self.tags.len()] {
            if len != n {
                return Err(Error::shape("feature set metadata", n, len));
            }
        }
        for m in self.layers.values() {
            if m.rows() != n {
                return Err(Error::shape("feature set layer rows", n, m.rows()));
            }
        }
        Ok(())
    }
}
