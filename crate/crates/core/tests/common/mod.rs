//! Reference implementations written against plain `Vec<f64>` so they share
//! no code with the library under test.

#![allow(dead_code)]

use ato_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

pub fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gaussian values rounded to f32 so ATD round trips can be compared bitwise.
pub fn gaussian_f32(seed: u64, rows: usize, cols: usize) -> Matrix {
    gaussian(seed, rows, cols).map(|v| v as f32 as f64)
}

pub fn centered(a: &Dense) -> Dense {
    let n = a.len() as f64;
    let cols = a[0].len();
    let means: Vec<f64> = (0..cols).map(|c| a.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    a.iter().map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect()).collect()
}

/// `aᵀ b`.
pub fn gram(a: &Dense, b: &Dense) -> Dense {
    let (p, q) = (a[0].len(), b[0].len());
    let mut out = vec![vec![0.0; q]; p];
    for (ra, rb) in a.iter().zip(b) {
        for i in 0..p {
            for j in 0..q {
                out[i][j] += ra[i] * rb[j];
            }
        }
    }
    out
}

/// Solves `a · z = rhs` (square `a`, several right-hand columns) by Gaussian
/// elimination with partial pivoting.
pub fn gauss_solve(a: &Dense, rhs: &Dense) -> Dense {
    let n = a.len();
    let m = rhs[0].len();
    let mut aug: Dense = a.iter().zip(rhs).map(|(r, b)| r.iter().chain(b).copied().collect()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        assert!(p.abs() > 1e-300, "oracle hit a singular pivot");
        for row in 0..n {
            if row != col {
                let f = aug[row][col] / p;
                if f != 0.0 {
                    for k in col..n + m {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| (0..m).map(|j| aug[i][n + j] / aug[i][i]).collect()).collect()
}

/// Ridge on centered data via the normal equations:
/// `(XcᵀXc + αI) tᵀ = XcᵀYc`, returned as `t` (`d_out × d_in`).
pub fn ridge_oracle(x: &Dense, y: &Dense, alpha: f64) -> Dense {
    let (xc, yc) = (centered(x), centered(y));
    let mut g = gram(&xc, &xc);
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += alpha;
    }
    let tt = gauss_solve(&g, &gram(&xc, &yc));
    let (din, dout) = (tt.len(), tt[0].len());
    (0..dout).map(|o| (0..din).map(|i| tt[i][o]).collect()).collect()
}

pub fn frob_rel_err(a: &Matrix, b: &Dense) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            num += (a[(r, c)] - v).powi(2);
            den += v * v;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

/// Uniform-average R² over columns; a constant column scores 1 if matched exactly, else 0.
pub fn r2_oracle(truth: &Dense, pred: &Dense) -> f64 {
    let n = truth.len() as f64;
    let cols = truth[0].len();
    let mut total = 0.0;
    for c in 0..cols {
        let mean = truth.iter().map(|r| r[c]).sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|r| (r[c] - mean).powi(2)).sum();
        let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t[c] - p[c]).powi(2)).sum();
        total += if ss_tot == 0.0 {
            if ss_res == 0.0 { 1.0 } else { 0.0 }
        } else {
            1.0 - ss_res / ss_tot
        };
    }
    total / cols as f64
}

/// Fitted ridge prediction of `x_eval` from a fit on `(x, y)`.
pub fn ridge_predict_oracle(x: &Dense, y: &Dense, alpha: f64, x_eval: &Dense) -> Dense {
    let t = ridge_oracle(x, y, alpha);
    let n = x.len() as f64;
    let xm: Vec<f64> = (0..x[0].len()).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let ym: Vec<f64> = (0..y[0].len()).map(|c| y.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    x_eval
        .iter()
        .map(|row| {
            (0..t.len())
                .map(|o| ym[o] + (0..row.len()).map(|i| t[o][i] * (row[i] - xm[i])).sum::<f64>())
                .collect()
        })
        .collect()
}
