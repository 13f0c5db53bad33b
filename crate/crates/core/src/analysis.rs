//! Layer-wise shift sensitivity and representation geometry: mean pairwise
//! distances, sensitivity scores, histogram TVD, CDNV, NC1 and PCA.
//!
//! Every statistic is computed in `f64` whatever the storage precision.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg::{matmul, svd, sym_pinv, trace};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng::indexed_substream;

pub const DEFAULT_TVD_BINS: usize = 40;
pub const DEFAULT_PCA_DIM: usize = 32;
const PINV_RCOND: f64 = 1e-10;

fn column_mean<T: Real>(m: &Matrix<T>) -> Vec<f64> {
    let mut mean = alloc::vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x.f64();
        }
    }
    let n = m.rows() as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    mean
}

/// Mean squared distance of rows to `center`.
fn spread<T: Real>(m: &Matrix<T>, center: &[f64]) -> f64 {
    let total: f64 = m
        .iter_rows()
        .map(|r| r.iter().zip(center).map(|(x, c)| (x.f64() - c) * (x.f64() - c)).sum::<f64>())
        .sum();
    total / m.rows() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/|A||B|) Σ_ij ‖a_i − b_j‖²`, self-pairs included.
///
/// Uses the identity `var(A) + var(B) + ‖μ_A − μ_B‖²` (population
/// variances), which equals the all-pairs mean exactly in real arithmetic.
pub fn mean_pairwise_dist<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("pairwise distance widths", a.cols(), b.cols()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let ma = column_mean(a);
    let mb = column_mean(b);
    Ok(spread(a, &ma) + spread(b, &mb) + sq_dist(&ma, &mb))
}

/// `|1 − dist(P, T) / dist(P, P)|`.
pub fn sensitivity_score<T: Real>(probe: &Matrix<T>, test: &Matrix<T>) -> Result<f64> {
    if probe.cols() != test.cols() {
        return Err(Error::shape("pairwise distance widths", probe.cols(), test.cols()));
    }
    let reference = mean_pairwise_dist(probe, probe)?;
    if reference <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let cross = mean_pairwise_dist(probe, test)?;
    Ok((1.0 - cross / reference).abs())
}

fn histogram(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<u64> {
    let mut h = alloc::vec![0u64; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        h[idx] += 1;
    }
    h
}

/// TVD between the empirical distributions of two columns, binned with
/// `bins` equal-width bins over the union of their ranges.
///
/// Computed on integer counts, so the result is exactly symmetric and never
/// leaves `[0, 1]`.
pub fn column_tvd(p: &[f64], q: &[f64], bins: usize) -> f64 {
    let (lo, hi) = p
        .iter()
        .chain(q)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let hp = histogram(p, lo, width, bins);
    let hq = histogram(q, lo, width, bins);
    let (np, nq) = (p.len() as u128, q.len() as u128);
    let diff: u128 = hp
        .iter()
        .zip(&hq)
        .map(|(&a, &b)| (a as u128 * nq).abs_diff(b as u128 * np))
        .sum();
    diff as f64 / (2 * np * nq) as f64
}

/// Mean over features of the per-feature histogram TVD.
pub fn feature_tvd<T: Real>(id: &Matrix<T>, ood: &Matrix<T>, bins: usize) -> Result<f64> {
    if id.cols() != ood.cols() {
        return Err(Error::shape("TVD feature widths", id.cols(), ood.cols()));
    }
    if id.rows() == 0 || ood.rows() == 0 || id.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::invalid("bins must be positive"));
    }
    let column = |m: &Matrix<T>, j: usize| -> Vec<f64> { m.iter_rows().map(|r| r[j].f64()).collect() };
    let total: f64 = (0..id.cols()).map(|j| column_tvd(&column(id, j), &column(ood, j), bins)).sum();
    Ok(total / id.cols() as f64)
}

fn class_rows<T: Real>(feats: &Matrix<T>, labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if feats.rows() != labels.len() {
        return Err(Error::shape("feature/label rows", feats.rows(), labels.len()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    Ok(by_class)
}

/// Mean over unordered class pairs of `(Var_i + Var_j) / (2‖μ_i − μ_j‖²)`.
pub fn cdnv<T: Real>(feats: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    let by_class = class_rows(feats, labels)?;
    let stats: Vec<(usize, Vec<f64>, f64)> = by_class
        .iter()
        .map(|(&c, idx)| {
            let m = feats.select_rows(idx);
            let mu = column_mean(&m);
            let var = spread(&m, &mu);
            (c, mu, var)
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            let d = sq_dist(&stats[i].1, &stats[j].1);
            if d == 0.0 {
                return Err(Error::DegenerateMeans(stats[i].0, stats[j].0));
            }
            total += (stats[i].2 + stats[j].2) / (2.0 * d);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `(1/K) tr(Σ_W Σ_B†)` with `Σ_W` the pooled within-class covariance
/// (normalized by the total sample count) and `Σ_B` the covariance of class
/// means around the global mean.
pub fn nc1<T: Real>(feats: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    let by_class = class_rows(feats, labels)?;
    let d = feats.cols();
    let k = by_class.len();
    let n = feats.rows() as f64;
    let global = column_mean(feats);
    let mut sw = Matrix::zeros(d, d);
    let mut sb = Matrix::zeros(d, d);
    let mut diff = alloc::vec![0.0; d];
    for idx in by_class.values() {
        let mu = column_mean(&feats.select_rows(idx));
        for &i in idx {
            for (t, (x, m)) in diff.iter_mut().zip(feats.row(i).iter().zip(&mu)) {
                *t = x.f64() - m;
            }
            add_outer(&mut sw, &diff, 1.0 / n);
        }
        for (t, (m, g)) in diff.iter_mut().zip(mu.iter().zip(&global)) {
            *t = m - g;
        }
        add_outer(&mut sb, &diff, 1.0 / k as f64);
    }
    let pinv = sym_pinv(&sb, PINV_RCOND)?;
    let value = trace(&matmul(&sw, &pinv)?) / k as f64;
    if !value.is_finite() {
        return Err(Error::Numerical("NC1 is not finite".into()));
    }
    // Round-off can leave a tiny negative value for collapsed classes.
    Ok(value.max(0.0))
}

fn add_outer(m: &mut Matrix<f64>, v: &[f64], scale: f64) {
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = m.row_mut(i);
        for (r, &vj) in row.iter_mut().zip(v) {
            *r += scale * vi * vj;
        }
    }
}

/// Centering mean and top-`k` principal directions of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// `d × k`, orthonormal columns.
    pub basis: Matrix<f64>,
    pub k: usize,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Set when fewer than `k` singular values are nonzero; the trailing
    /// directions then span an arbitrary orthonormal completion.
    pub rank_deficient: bool,
}

/// Top-`k` right singular vectors of the centred training features. Each
/// component is oriented so its largest-magnitude entry is positive.
pub fn fit_pca<T: Real>(layer: usize, train: &Matrix<T>, k: usize) -> Result<PcaProjector> {
    let (n, d) = (train.rows(), train.cols());
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(alloc::format!("PCA dimension {k} must lie in 1..={}", n.min(d))));
    }
    let mean = column_mean(train);
    let mut centred = Matrix::zeros(n, d);
    for (i, row) in train.iter_rows().enumerate() {
        for (c, (x, m)) in centred.row_mut(i).iter_mut().zip(row.iter().zip(&mean)) {
            *c = x.f64() - m;
        }
    }
    let s = svd(&centred)?;
    let top = s.singular_values.first().copied().unwrap_or(0.0);
    let tol = top * 1e-10 * n.max(d) as f64;
    let rank = s.singular_values.iter().filter(|&&v| v > tol).count();
    let mut basis = Matrix::zeros(d, k);
    for c in 0..k {
        let col: Vec<f64> = (0..d).map(|r| s.v.get(r, c)).collect();
        let lead = col.iter().fold(0.0f64, |best, &v| if v.abs() > best.abs() { v } else { best });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            basis.set(r, c, sign * v);
        }
    }
    let explained_variance = s.singular_values[..k].iter().map(|v| v * v / n as f64).collect();
    Ok(PcaProjector {
        layer,
        mean,
        basis,
        k,
        explained_variance,
        rank_deficient: rank < k,
    })
}

/// `(x − mean) · basis` for every row.
pub fn project<T: Real>(p: &PcaProjector, feats: &Matrix<T>) -> Result<Matrix<f64>> {
    if feats.cols() != p.mean.len() {
        return Err(Error::shape("PCA input", p.mean.len(), feats.cols()));
    }
    let mut out = Matrix::zeros(feats.rows(), p.k);
    let mut c = alloc::vec![0.0; p.mean.len()];
    for (i, row) in feats.iter_rows().enumerate() {
        for (t, (x, m)) in c.iter_mut().zip(row.iter().zip(&p.mean)) {
            *t = x.f64() - m;
        }
        let o = out.row_mut(i);
        for (r, &cr) in c.iter().enumerate() {
            if cr == 0.0 {
                continue;
            }
            for (j, b) in p.basis.row(r).iter().enumerate() {
                o[j] += cr * b;
            }
        }
    }
    Ok(out)
}

/// `mean + z · basisᵀ`.
pub fn reconstruct(p: &PcaProjector, coords: &Matrix<f64>) -> Result<Matrix<f64>> {
    if coords.cols() != p.k {
        return Err(Error::shape("PCA coordinates", p.k, coords.cols()));
    }
    let mut out = matmul(coords, &p.basis.transpose())?;
    for i in 0..out.rows() {
        for (x, m) in out.row_mut(i).iter_mut().zip(&p.mean) {
            *x += m;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-layer profiles over feature sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupDists {
    pub probe_probe: f64,
    pub probe_test: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// layer → group → sens
    pub per_layer: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub dists: BTreeMap<usize, BTreeMap<usize, GroupDists>>,
}

impl SensitivityProfile {
    /// Mean sensitivity over groups for each layer.
    pub fn layer_means(&self) -> BTreeMap<usize, f64> {
        self.per_layer
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(&l, g)| (l, g.values().sum::<f64>() / g.len() as f64))
            .collect()
    }
}

/// Per-layer, per-group sensitivity of `test` relative to `probe`. Groups
/// absent from either split or with zero probe spread are skipped.
pub fn sensitivity_profile(probe: &FeatureSet, test: &FeatureSet, layers: &[usize]) -> Result<SensitivityProfile> {
    let mut out = SensitivityProfile::default();
    let groups = probe.num_groups.max(test.num_groups);
    for &l in layers {
        let (pl, tl) = (probe.layer(l)?, test.layer(l)?);
        let mut sens = BTreeMap::new();
        let mut dists = BTreeMap::new();
        for g in 0..groups {
            let (pi, ti) = (probe.group_indices(g), test.group_indices(g));
            if pi.is_empty() || ti.is_empty() {
                continue;
            }
            let (pg, tg) = (pl.select_rows(&pi), tl.select_rows(&ti));
            let pp = mean_pairwise_dist(&pg, &pg)?;
            if pp <= 0.0 {
                continue;
            }
            let pt = mean_pairwise_dist(&pg, &tg)?;
            sens.insert(g, (1.0 - pt / pp).abs());
            dists.insert(
                g,
                GroupDists {
                    probe_probe: pp,
                    probe_test: pt,
                },
            );
        }
        out.per_layer.insert(l, sens);
        out.dists.insert(l, dists);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TvdProfile {
    pub per_layer: BTreeMap<usize, f64>,
    pub bins: usize,
    /// layer → group → TVD, each group subsampled to the smallest group size.
    pub per_group: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub group_sample_size: usize,
    pub seed: u64,
}

/// Layer-wise mean feature TVD between `id` and `ood`, overall and per group.
///
/// For the per-group variant both sides of every group are subsampled
/// (without replacement, seeded by `seed` and the group index) to the
/// smallest group size found on either side.
pub fn tvd_profile(id: &FeatureSet, ood: &FeatureSet, layers: &[usize], bins: usize, seed: u64) -> Result<TvdProfile> {
    let groups = id.num_groups.max(ood.num_groups);
    let present: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..groups)
        .map(|g| (g, id.group_indices(g), ood.group_indices(g)))
        .filter(|(_, a, b)| !a.is_empty() && !b.is_empty())
        .collect();
    let m = present.iter().map(|(_, a, b)| a.len().min(b.len())).min().unwrap_or(0);
    let picks: Vec<(usize, Vec<usize>, Vec<usize>)> = present
        .into_iter()
        .map(|(g, mut a, mut b)| {
            let mut rng = indexed_substream(seed, "tvd/group", g as u64);
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            a.truncate(m);
            b.truncate(m);
            a.sort_unstable();
            b.sort_unstable();
            (g, a, b)
        })
        .collect();
    let mut out = TvdProfile {
        bins,
        group_sample_size: m,
        seed,
        ..Default::default()
    };
    for &l in layers {
        let (il, ol) = (id.layer(l)?, ood.layer(l)?);
        out.per_layer.insert(l, feature_tvd(il, ol, bins)?);
        let mut per = BTreeMap::new();
        for (g, a, b) in &picks {
            per.insert(*g, feature_tvd(&il.select_rows(a), &ol.select_rows(b), bins)?);
        }
        out.per_group.insert(l, per);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseProfile {
    pub cdnv: BTreeMap<usize, f64>,
    pub nc1: Option<BTreeMap<usize, f64>>,
}

pub fn collapse_profile(fs: &FeatureSet, layers: &[usize], with_nc1: bool) -> Result<CollapseProfile> {
    let mut out = CollapseProfile {
        nc1: with_nc1.then(BTreeMap::new),
        ..Default::default()
    };
    for &l in layers {
        let m = fs.layer(l)?;
        out.cdnv.insert(l, cdnv(m, &fs.labels)?);
        if let Some(n) = out.nc1.as_mut() {
            n.insert(l, nc1(m, &fs.labels)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::rng::substream;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v).unwrap()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = substream(seed, "test");
        mat(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn naive_dist(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        let mut s = 0.0;
        for x in a.iter_rows() {
            for y in b.iter_rows() {
                s += sq_dist(x, y);
            }
        }
        s / (a.rows() * b.rows()) as f64
    }

    #[test]
    fn dist_singleton_and_pair() {
        let a = mat(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(mean_pairwise_dist(&a, &a).unwrap(), 0.0);
        let b = mat(1, 3, vec![0.0, 4.0, 3.0]);
        assert!((mean_pairwise_dist(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dist_matches_double_loop() {
        let a = gaussian(20, 5, 1);
        let b = gaussian(30, 5, 2);
        let got = mean_pairwise_dist(&a, &b).unwrap();
        let want = naive_dist(&a, &b);
        assert!((got - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn dist_errors() {
        let a = gaussian(3, 2, 1);
        assert!(matches!(mean_pairwise_dist(&a, &gaussian(3, 3, 1)), Err(Error::Shape { .. })));
        assert_eq!(mean_pairwise_dist(&a, &Matrix::zeros(0, 2)).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn sens_examples() {
        let p = gaussian(10, 4, 3);
        assert!(sensitivity_score(&p, &p).unwrap().abs() < 1e-12);
        // Probe {-1, +1} on a line; test {-2, +2}.
        let probe = mat(2, 1, vec![-1.0, 1.0]);
        let test = mat(2, 1, vec![-2.0, 2.0]);
        // dist(P,P) = (0 + 4 + 4 + 0)/4 = 2; dist(P,T) = (1 + 9 + 9 + 1)/4 = 5.
        assert!((sensitivity_score(&probe, &test).unwrap() - 1.5).abs() < 1e-12);
        let flat = mat(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(sensitivity_score(&flat, &p), Err(Error::Shape { .. })));
        assert_eq!(sensitivity_score(&flat, &flat).unwrap_err(), Error::DegenerateReference);
    }

    #[test]
    fn tvd_examples() {
        let a = gaussian(50, 3, 4);
        assert_eq!(feature_tvd(&a, &a, 40).unwrap(), 0.0);
        let lo = mat(3, 1, vec![-3.0, -2.0, -1.0]);
        let hi = mat(3, 1, vec![2.0, 3.0, 4.0]);
        assert!((feature_tvd(&lo, &hi, 40).unwrap() - 1.0).abs() < 1e-12);
        // P has half its mass in each of two bins, Q all of it in the first.
        let p = [0.0, 1.0];
        let q = [0.0, 0.0, 0.25];
        assert!((column_tvd(&p, &q, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tvd_constant_columns() {
        let same = mat(2, 1, vec![3.0, 3.0]);
        assert_eq!(feature_tvd(&same, &same, 40).unwrap(), 0.0);
        let other = mat(2, 1, vec![5.0, 5.0]);
        assert_eq!(feature_tvd(&same, &other, 40).unwrap(), 1.0);
    }

    fn naive_cdnv(x: &Matrix<f64>, y: &[usize], k: usize) -> f64 {
        let mut mus = vec![];
        let mut vars = vec![];
        for c in 0..k {
            let rows: Vec<&[f64]> = x.iter_rows().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            let mut mu = vec![0.0; x.cols()];
            for r in &rows {
                for j in 0..x.cols() {
                    mu[j] += r[j] / rows.len() as f64;
                }
            }
            let var = rows.iter().map(|r| sq_dist(r, &mu)).sum::<f64>() / rows.len() as f64;
            mus.push(mu);
            vars.push(var);
        }
        let mut s = 0.0;
        let mut c = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i < j {
                    s += (vars[i] + vars[j]) / (2.0 * sq_dist(&mus[i], &mus[j]));
                    c += 1.0;
                }
            }
        }
        s / c
    }

    fn three_class_toy(seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = substream(seed, "toy");
        let centers = [[0.0, 0.0, 0.0, 1.0], [3.0, 0.0, 1.0, 0.0], [0.0, 4.0, -1.0, 2.0]];
        let mut data = vec![];
        let mut labels = vec![];
        for i in 0..45 {
            let c = i % 3;
            for j in 0..4 {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(centers[c][j] + z * (0.5 + 0.2 * c as f64));
            }
            labels.push(c);
        }
        (mat(45, 4, data), labels)
    }

    #[test]
    fn cdnv_examples() {
        let x = mat(4, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(cdnv(&x, &[0, 0, 1, 1]).unwrap(), 0.0);
        let same = mat(4, 1, vec![-1.0, 1.0, -2.0, 2.0]);
        assert_eq!(cdnv(&same, &[0, 0, 1, 1]).unwrap_err(), Error::DegenerateMeans(0, 1));
        let (x, y) = three_class_toy(5);
        let got = cdnv(&x, &y).unwrap();
        let want = naive_cdnv(&x, &y, 3);
        assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }

    /// Dense-matrix NC1 with nalgebra's SVD-based pseudoinverse.
    fn oracle_nc1(x: &Matrix<f64>, y: &[usize], k: usize) -> f64 {
        let d = x.cols();
        let n = x.rows();
        let xs = DMatrix::from_row_slice(n, d, x.as_slice());
        let g = xs.row_mean().transpose();
        let mut sw = DMatrix::<f64>::zeros(d, d);
        let mut sb = DMatrix::<f64>::zeros(d, d);
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
            let mut mu = nalgebra::DVector::<f64>::zeros(d);
            for &i in &idx {
                mu += xs.row(i).transpose();
            }
            mu /= idx.len() as f64;
            for &i in &idx {
                let dv = xs.row(i).transpose() - &mu;
                sw += &dv * dv.transpose();
            }
            let dm = &mu - &g;
            sb += &dm * dm.transpose();
        }
        sw /= n as f64;
        sb /= k as f64;
        let pinv = sb.clone().pseudo_inverse(1e-10 * sb.norm()).unwrap();
        (sw * pinv).trace() / k as f64
    }

    #[test]
    fn nc1_matches_dense_oracle() {
        let x = mat(6, 3, vec![1.0, 0.5, -0.2, 1.4, 0.1, 0.3, 0.8, 0.7, 0.0, -1.0, 0.2, 0.9, -1.3, -0.4, 1.1, -0.6, 0.3, 0.7]);
        let y = [0, 0, 0, 1, 1, 1];
        let got = nc1(&x, &y).unwrap();
        let want = oracle_nc1(&x, &y, 2);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        let (x, y) = three_class_toy(6);
        let got = nc1(&x, &y).unwrap();
        let want = oracle_nc1(&x, &y, 3);
        assert!((got - want).abs() < 1e-8 * want.max(1.0));
    }

    #[test]
    fn nc1_collapsed_is_zero_and_scale_invariant() {
        let x = mat(4, 2, vec![0.0, 1.0, 0.0, 1.0, 2.0, -1.0, 2.0, -1.0]);
        assert!(nc1(&x, &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        let (x, y) = three_class_toy(7);
        let a = nc1(&x, &y).unwrap();
        let b = nc1(&x.map(|v| 3.5 * v), &y).unwrap();
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    fn random_rotation(d: usize, seed: u64) -> Matrix<f64> {
        let g = DMatrix::from_row_slice(d, d, gaussian(d, d, seed).as_slice());
        let q = g.qr().q();
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out.set(i, j, q[(i, j)]);
            }
        }
        out
    }

    #[test]
    fn collapse_metrics_rotation_invariant() {
        let (x, y) = three_class_toy(8);
        let r = random_rotation(4, 9);
        let xr = matmul(&x, &r).unwrap();
        let (c0, c1) = (cdnv(&x, &y).unwrap(), cdnv(&xr, &y).unwrap());
        assert!((c0 - c1).abs() < 1e-9 * c0);
        let (n0, n1) = (nc1(&x, &y).unwrap(), nc1(&xr, &y).unwrap());
        assert!((n0 - n1).abs() < 1e-8 * n0.max(1.0));
    }

    #[test]
    fn pca_exact_subspace_round_trip() {
        // 40 points in a 2-dim affine subspace of R^6.
        let mut rng = substream(11, "pca");
        let dirs = gaussian(2, 6, 12);
        let offset: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut data = vec![];
        for _ in 0..40 {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            for j in 0..6 {
                data.push(offset[j] + a * dirs.get(0, j) + b * dirs.get(1, j));
            }
        }
        let x = mat(40, 6, data);
        let p = fit_pca(1, &x, 2).unwrap();
        assert!(!p.rank_deficient);
        let back = reconstruct(&p, &project(&p, &x).unwrap()).unwrap();
        for (u, v) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((u - v).abs() < 1e-5);
        }
        let p3 = fit_pca(1, &x, 3).unwrap();
        assert!(p3.rank_deficient);
    }

    #[test]
    fn pca_basis_orthonormal_and_sign_convention() {
        let x = gaussian(50, 8, 13);
        let p = fit_pca(2, &x, 5).unwrap();
        let btb = matmul(&p.basis.transpose(), &p.basis).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((btb.get(i, j) - e).abs() < 1e-5);
            }
            let col: Vec<f64> = (0..8).map(|r| p.basis.get(r, i)).collect();
            let lead = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn pca_variances_match_covariance_eigenvalues() {
        let mut x = gaussian(50, 8, 14);
        for i in 0..50 {
            for j in 0..8 {
                x.set(i, j, x.get(i, j) * (j + 1) as f64);
            }
        }
        let p = fit_pca(1, &x, 8).unwrap();
        for w in p.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let xs = DMatrix::from_row_slice(50, 8, x.as_slice());
        let mean = xs.row_mean();
        let mut c = xs.clone();
        for i in 0..50 {
            let r = c.row(i) - &mean;
            c.set_row(i, &r);
        }
        let cov = c.transpose() * &c / 50.0;
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in p.explained_variance.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-8 * b.max(1.0));
        }
    }

    #[test]
    fn project_contracts() {
        let x = gaussian(30, 6, 15);
        let p = fit_pca(1, &x, 3).unwrap();
        let mean = mat(1, 6, p.mean.clone());
        let z = project(&p, &mean).unwrap();
        assert!(z.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(project(&p, &z), Err(Error::Shape { .. })));
        assert!(fit_pca(1, &x, 7).is_err());
    }

    #[test]
    fn pca_training_projection_is_centred_and_decorrelated() {
        let x = gaussian(60, 5, 16);
        let p = fit_pca(1, &x, 5).unwrap();
        let z = project(&p, &x).unwrap();
        let mu = column_mean(&z);
        assert!(mu.iter().all(|m| m.abs() < 1e-6));
        let cov = matmul(&z.transpose(), &z).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(cov.get(i, j).abs() < 1e-6);
                }
            }
            if i > 0 {
                assert!(cov.get(i, i) <= cov.get(i - 1, i - 1) + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn dist_is_symmetric(seed in 0u64..1000, na in 1usize..12, nb in 1usize..12) {
            let a = gaussian(na, 3, seed);
            let b = gaussian(nb, 3, seed + 1);
            let ab = mean_pairwise_dist(&a, &b).unwrap();
            let ba = mean_pairwise_dist(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert!((ab - naive_dist(&a, &b)).abs() <= 1e-9 * ab.max(1.0));
        }

        #[test]
        fn sens_of_self_is_zero(seed in 0u64..1000, n in 2usize..15) {
            let a = gaussian(n, 4, seed);
            prop_assert!(sensitivity_score(&a, &a).unwrap().abs() < 1e-12);
        }

        #[test]
        fn tvd_bounded_and_symmetric(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let a = gaussian(30, 3, seed);
            let b = gaussian(25, 3, seed + 7).map(|v| v + shift);
            let ab = feature_tvd(&a, &b, 40).unwrap();
            let ba = feature_tvd(&b, &a, 40).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(feature_tvd(&a, &a, 40).unwrap(), 0.0);
        }

        #[test]
        fn tvd_of_disjoint_columns_is_one(n in 1usize..60, m in 1usize..60, gap in 0.1f64..5.0) {
            let p: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let q: Vec<f64> = (0..m).map(|i| 1.0 + gap + i as f64 / m as f64).collect();
            prop_assert_eq!(column_tvd(&p, &q, 40), 1.0);
            prop_assert_eq!(column_tvd(&q, &p, 40), 1.0);
        }
    }
}
