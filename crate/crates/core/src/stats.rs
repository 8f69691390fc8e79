//! Small dense-statistics helpers shared by the fitting and analysis modules.

use nalgebra::{DVector, SymmetricEigen};

use crate::Matrix;

/// Threshold below which a sum of squares is treated as zero.
const SS_ZERO: f64 = 1e-300;

pub fn column_means(m: &Matrix) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// `m` with `mean` subtracted from every row.
pub fn center(m: &Matrix, mean: &DVector<f64>) -> Matrix {
    let mut out = m.clone();
    for (mut col, mu) in out.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-mu);
    }
    out
}

/// `1/N · Mcᵀ Mc` for column-centered `m`.
pub fn covariance(centered: &Matrix) -> Matrix {
    let n = centered.nrows() as f64;
    centered.tr_mul(centered) / n
}

/// Coefficient of determination of one output column.
///
/// A constant true column scores 1 when predicted exactly and 0 otherwise.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot <= SS_ZERO {
        return if ss_res <= SS_ZERO { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Per-column R² of `pred` against `truth`.
pub fn r2_per_column(truth: &Matrix, pred: &Matrix) -> Vec<f64> {
    truth
        .column_iter()
        .zip(pred.column_iter())
        .map(|(t, p)| r2_score(t.as_slice(), p.as_slice()))
        .collect()
}

/// R² averaged uniformly over output columns.
pub fn r2_uniform(truth: &Matrix, pred: &Matrix) -> f64 {
    let per = r2_per_column(truth, pred);
    per.iter().sum::<f64>() / per.len() as f64
}

/// `(a + eps·I)^{-1/2}` for symmetric `a`, eigenvalues clamped below at `floor`.
pub fn inv_sqrt_psd(a: &Matrix, eps: f64, floor: f64) -> Matrix {
    let n = a.nrows();
    let mut reg = a.clone();
    for i in 0..n {
        reg[(i, i)] += eps;
    }
    // symmetrise against round-off before the eigensolver
    let reg = (&reg + reg.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reg);
    let scale = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    let v = &eig.eigenvectors;
    let scaled = Matrix::from_fn(n, n, |r, c| v[(r, c)] * scale[c]);
    let w = &scaled * v.transpose();
    (&w + w.transpose()) * 0.5
}

/// Singular values and vectors sorted by descending singular value.
pub struct SortedSvd {
    pub u: Matrix,
    pub singular_values: DVector<f64>,
    pub v_t: Matrix,
}

pub fn sorted_svd(m: &Matrix) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested u");
    let v_t = svd.v_t.expect("requested v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    SortedSvd {
        u: u.select_columns(order.iter()),
        singular_values: DVector::from_iterator(order.len(), order.iter().map(|&i| s[i])),
        v_t: v_t.select_rows(order.iter()),
    }
}

pub fn singular_values_desc(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_conventions() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert!((r2_score(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0])).abs() < 1e-15);
        assert_eq!(r2_score(&[4.0, 4.0], &[4.0, 4.0]), 1.0);
        assert_eq!(r2_score(&[4.0, 4.0], &[4.0, 5.0]), 0.0);
    }

    #[test]
    fn inv_sqrt_of_diagonal() {
        let a = Matrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let w = inv_sqrt_psd(&a, 0.0, 1e-10);
        assert!((w[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((w[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(w[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn sorted_svd_reconstructs() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.0, 1.0, 1.0]);
        let svd = sorted_svd(&m);
        let s = &svd.singular_values;
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        let back = &svd.u * Matrix::from_diagonal(s) * &svd.v_t;
        assert!((back - m).abs().max() < 1e-12);
    }
}
