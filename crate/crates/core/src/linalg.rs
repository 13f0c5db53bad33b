//! Small dense eigen/SVD routines (cyclic Jacobi) in `f64`.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix: values in descending order,
/// `vectors` holds the matching eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix<f64>,
}

pub fn sym_eigen(a: &Matrix<f64>) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("symmetric eigen input", n, a.cols()));
    }
    let mut m = a.clone();
    // Symmetrize away round-off.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = identity(n);
    let scale: f64 = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical("symmetric eigen-decomposition did not converge".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(SymEigen { values, vectors })
}

pub fn identity(n: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

pub fn matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.cols(), b.rows()));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let o = out.row_mut(i);
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (x, &bkj) in o.iter_mut().zip(b.row(k)) {
                *x += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn trace(a: &Matrix<f64>) -> f64 {
    (0..a.rows().min(a.cols())).map(|i| a.get(i, i)).sum()
}

/// Moore–Penrose pseudoinverse of a symmetric matrix; eigenvalues with
/// magnitude at most `rcond · max|λ|` are treated as zero.
pub fn sym_pinv(a: &Matrix<f64>, rcond: f64) -> Result<Matrix<f64>> {
    let e = sym_eigen(a)?;
    let n = a.rows();
    let max = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = rcond * max;
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in e.values.iter().enumerate() {
        if lam.abs() <= cut || lam == 0.0 {
            continue;
        }
        let inv = 1.0 / lam;
        for i in 0..n {
            let vi = e.vectors.get(i, k) * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                let cur = out.get(i, j);
                out.set(i, j, cur + vi * e.vectors.get(j, k));
            }
        }
    }
    Ok(out)
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` descending; `v` holds right
/// singular vectors as columns (`cols × r`, `r = min(rows, cols)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub v: Matrix<f64>,
}

/// One-sided Jacobi on the columns of `a`. Only `s` and `V` are returned.
pub fn svd(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    // Work on columns: store Aᵀ so each column is a contiguous row.
    let mut cols = a.transpose();
    let mut v = identity(n);
    let eps = 1e-13;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = cols.row(p);
                    let cq = cols.row(q);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let x = cols.get(p, k);
                    let y = cols.get(q, k);
                    cols.set(p, k, c * x - s * y);
                    cols.set(q, k, s * x + c * y);
                }
                for k in 0..n {
                    let x = v.get(k, p);
                    let y = v.get(k, q);
                    v.set(k, p, c * x - s * y);
                    v.set(k, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter_rows().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let r = m.min(n);
    let mut vout = Matrix::zeros(n, r);
    let mut singular_values = Vec::with_capacity(r);
    for (dst, &src) in order.iter().take(r).enumerate() {
        singular_values.push(norms[src]);
        for k in 0..n {
            vout.set(k, dst, v.get(k, src));
        }
    }
    Ok(Svd {
        singular_values,
        v: vout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
    }

    fn from_seed(rows: usize, cols: usize, vals: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap()
    }

    #[test]
    fn eigen_of_diagonal() {
        let m = Matrix::from_rows(&[vec_of(&[1.0, 0.0]), vec_of(&[0.0, 3.0])]).unwrap();
        let e = sym_eigen(&m).unwrap();
        assert_eq!(e.values, [3.0, 1.0]);
    }

    fn vec_of(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    proptest! {
        #[test]
        fn eigen_matches_nalgebra(vals in proptest::collection::vec(-3.0f64..3.0, 36)) {
            let b = from_seed(6, 6, &vals);
            let a = matmul(&b, &b.transpose()).unwrap();
            let e = sym_eigen(&a).unwrap();
            let mut want: Vec<f64> = to_na(&a).symmetric_eigen().eigenvalues.iter().copied().collect();
            want.sort_by(|x, y| y.total_cmp(x));
            for (g, w) in e.values.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-8 * (1.0 + w.abs()));
            }
            // A v = λ v
            for k in 0..6 {
                for i in 0..6 {
                    let av: f64 = (0..6).map(|j| a.get(i, j) * e.vectors.get(j, k)).sum();
                    prop_assert!((av - e.values[k] * e.vectors.get(i, k)).abs() < 1e-8 * (1.0 + e.values[0]));
                }
            }
        }

        #[test]
        fn pinv_matches_nalgebra(vals in proptest::collection::vec(-3.0f64..3.0, 30)) {
            // Rank-deficient: 6×5 factor gives a rank-5 6×6 PSD matrix.
            let b = from_seed(6, 5, &vals);
            let a = matmul(&b, &b.transpose()).unwrap();
            let p = sym_pinv(&a, 1e-10).unwrap();
            let want = to_na(&a).pseudo_inverse(1e-8 * to_na(&a).norm()).unwrap();
            let scale = want.norm().max(1.0);
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((p.get(i, j) - want[(i, j)]).abs() < 1e-6 * scale);
                }
            }
        }

        #[test]
        fn svd_matches_nalgebra(vals in proptest::collection::vec(-3.0f64..3.0, 40)) {
            let a = from_seed(8, 5, &vals);
            let s = svd(&a).unwrap();
            let want = to_na(&a).singular_values();
            let mut want: Vec<f64> = want.iter().copied().collect();
            want.sort_by(|x, y| y.total_cmp(x));
            for (g, w) in s.singular_values.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-9 * (1.0 + w));
            }
            // Columns of V are orthonormal.
            let vtv = matmul(&s.v.transpose(), &s.v).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((vtv.get(i, j) - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn svd_wide_matrix_keeps_min_dim() {
        let a = Matrix::from_vec(2, 4, alloc::vec![1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.singular_values.len(), 2);
        assert_eq!((s.v.rows(), s.v.cols()), (4, 2));
    }
}
