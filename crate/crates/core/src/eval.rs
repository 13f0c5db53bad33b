//! Accuracy, worst-group accuracy and seed aggregation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::data::ShiftKind;
use crate::error::{Error, Result};

/// Validation metric used for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    WorstGroupAccuracy,
}

impl Metric {
    /// Worst-group accuracy under subpopulation shift, accuracy otherwise.
    pub fn for_shift(kind: ShiftKind) -> Self {
        match kind {
            ShiftKind::Subpopulation => Metric::WorstGroupAccuracy,
            _ => Metric::Accuracy,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::WorstGroupAccuracy => "wga",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub metric: Metric,
    /// Value of `metric`.
    pub value: f64,
    /// Plain accuracy, reported alongside whatever `metric` is.
    pub accuracy: f64,
    /// Accuracy of every group present in the split.
    pub per_group: BTreeMap<usize, f64>,
    pub n: usize,
}

impl EvalResult {
    pub fn worst_group(&self) -> f64 {
        self.per_group.values().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("predictions", labels.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy of each group that has samples.
pub fn group_accuracies(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if preds.len() != labels.len() {
        return Err(Error::shape("predictions", labels.len(), preds.len()));
    }
    if groups.len() != labels.len() {
        return Err(Error::shape("groups", labels.len(), groups.len()));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((p, y), &g) in preds.iter().zip(labels).zip(groups) {
        let t = tally.entry(g).or_default();
        t.1 += 1;
        if p == y {
            t.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(g, (h, c))| (g, h as f64 / c as f64)).collect())
}

/// Full evaluation of one split.
pub fn evaluate(split: &str, preds: &[usize], labels: &[usize], groups: &[usize], num_groups: usize, metric: Metric) -> Result<EvalResult> {
    let acc = accuracy(preds, labels)?;
    let per_group = group_accuracies(preds, labels, groups)?;
    if let Some(&g) = per_group.keys().find(|&&g| g >= num_groups) {
        return Err(Error::invalid(format!("group {g} outside 0..{num_groups}")));
    }
    let value = match metric {
        Metric::Accuracy => acc,
        Metric::WorstGroupAccuracy => {
            if let Some(g) = (0..num_groups).find(|g| !per_group.contains_key(g)) {
                return Err(Error::EmptyGroup(g));
            }
            per_group.values().copied().fold(f64::INFINITY, f64::min)
        }
    };
    Ok(EvalResult {
        split: split.into(),
        metric,
        value,
        accuracy: acc,
        per_group,
        n: preds.len(),
    })
}

/// Minimum of per-group accuracies; every group in `0..num_groups` must
/// have samples.
pub fn worst_group_accuracy(preds: &[usize], labels: &[usize], groups: &[usize], num_groups: usize) -> Result<EvalResult> {
    evaluate("", preds, labels, groups, num_groups, Metric::WorstGroupAccuracy)
}

pub fn score_predictions(preds: &[usize], labels: &[usize], groups: &[usize], num_groups: usize, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(preds, labels),
        Metric::WorstGroupAccuracy => Ok(worst_group_accuracy(preds, labels, groups, num_groups)?.value),
    }
}

/// Mean and sample standard deviation (`n − 1`; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, num_traits::Float::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn wga_is_min_over_groups() {
        // Group accuracies 0.9, 0.8, 0.7 from ten samples each.
        let mut preds = Vec::new();
        let mut groups = Vec::new();
        for (g, hits) in [(0, 9), (1, 8), (2, 7)] {
            for i in 0..10 {
                preds.push(usize::from(i >= hits));
                groups.push(g);
            }
        }
        let labels = alloc::vec![0; 30];
        let r = worst_group_accuracy(&preds, &labels, &groups, 3).unwrap();
        assert!((r.value - 0.7).abs() < 1e-12);
        assert_eq!(r.per_group.len(), 3);
        assert!((r.per_group[&1] - 0.8).abs() < 1e-12);
        assert_eq!(r.value, r.worst_group());
    }

    #[test]
    fn single_group_wga_equals_accuracy() {
        let r = worst_group_accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0], &[0; 4], 1).unwrap();
        assert_eq!(r.value, r.accuracy);
        assert_eq!(r.value, 0.75);
    }

    #[test]
    fn group_forced_wrong_gives_zero() {
        let labels = [0, 1, 0, 1, 0, 1];
        let preds = [0, 1, 0, 1, 1, 0];
        let groups = [0, 0, 1, 1, 2, 2];
        assert_eq!(worst_group_accuracy(&preds, &labels, &groups, 3).unwrap().value, 0.0);
    }

    #[test]
    fn empty_group_is_an_error_for_wga() {
        let err = worst_group_accuracy(&[0, 1], &[0, 1], &[0, 0], 2).unwrap_err();
        assert_eq!(err, Error::EmptyGroup(1));
    }

    #[test]
    fn accuracy_rejects_empty_and_mismatched() {
        assert_eq!(accuracy(&[], &[]).unwrap_err(), Error::EmptyInput);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn metric_follows_shift_kind() {
        assert_eq!(Metric::for_shift(ShiftKind::Subpopulation), Metric::WorstGroupAccuracy);
        assert_eq!(Metric::for_shift(ShiftKind::Conditional), Metric::Accuracy);
        assert_eq!(Metric::for_shift(ShiftKind::InputNoise), Metric::Accuracy);
    }

    fn labelled() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..3, n),
                proptest::collection::vec(0usize..3, n),
                proptest::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn wga_never_exceeds_accuracy((preds, labels, groups) in labelled()) {
            let r = evaluate("t", &preds, &labels, &groups, 4, Metric::Accuracy).unwrap();
            prop_assert!(r.worst_group() <= r.accuracy + 1e-12);
        }

        #[test]
        fn accuracy_is_permutation_invariant((preds, labels, _g) in labelled(), rot in 0usize..60) {
            let n = preds.len();
            let r = rot % n;
            let p2: Vec<usize> = (0..n).map(|i| preds[(i + r) % n]).collect();
            let l2: Vec<usize> = (0..n).map(|i| labels[(i + r) % n]).collect();
            prop_assert_eq!(accuracy(&preds, &labels).unwrap(), accuracy(&p2, &l2).unwrap());
        }
    }
}
