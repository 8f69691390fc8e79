//! Affine transport operators: closed-form ridge fits, cross-validated
//! regularisation, rank truncation and prediction.
//!
//! Fits are done on column-centered data, so a fitted operator predicts
//! `t·(v − x_mean) + y_mean + b` with `b = 0`. The explicit bias is kept so
//! intervention code can shift predictions without refitting.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, center, column_means, sorted_svd};
use crate::tensor_io::{
    atomic_write, check_magic, decode_rows, dtype_width, encode_f64_rows, ensure_finite, read_file,
    read_u32, read_u64, SplitSpec, DTYPE_F64_LE,
};
use crate::Matrix;

pub const ATO_MAGIC: &[u8; 4] = b"ATO1";
pub const ATO_VERSION: u32 = 1;

/// Singular values below `RANK_TOL · σ_max` do not count towards numerical rank.
pub const RANK_TOL: f64 = 1e-8;

/// Reciprocal condition number below which an unregularised system is refused.
const MIN_RCOND: f64 = 1e-12;

/// Cross-validated score of one grid value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaScore {
    pub alpha: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitStats {
    pub train_r2: f64,
    /// Empty for a plain ridge fit. One entry per grid value, in grid order.
    #[serde(default)]
    pub cv_r2_by_alpha: Vec<AlphaScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_folds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_seed: Option<u64>,
    /// Split used to carve the training rows out of a larger pairset, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

impl FitStats {
    /// Cross-validated R² of the selected alpha.
    pub fn selected_cv_r2(&self, alpha: f64) -> Option<f64> {
        self.cv_r2_by_alpha
            .iter()
            .find(|s| s.alpha == alpha)
            .map(|s| s.r2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportOperator {
    pub t: Matrix,
    pub b: DVector<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub fit_stats: FitStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub alpha_grid: Vec<f64>,
    pub n_folds: usize,
    pub fold_seed: u64,
}

impl Default for FitConfig {
    /// Nine log-spaced alphas from 1e-4 to 1e4, five folds.
    fn default() -> Self {
        Self {
            alpha_grid: log_grid(1e-4, 1e4, 9),
            n_folds: 5,
            fold_seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidConfig("alphas must be finite and > 0".into()));
        }
        if self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("alpha grid must be strictly increasing".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidConfig("need at least 2 folds".into()));
        }
        Ok(())
    }
}

/// `count` values from `lo` to `hi` inclusive, evenly spaced in log10.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

fn check_xy(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} rows, y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::DimensionMismatch("zero columns".into()));
    }
    ensure_finite(x, "x")?;
    ensure_finite(y, "y")
}

/// Solves `(XcᵀXc + αI) W = XcᵀYc` and returns `W`.
fn solve_ridge_system(xc: &Matrix, yc: &Matrix, alpha: f64) -> Result<Matrix> {
    let d = xc.ncols();
    let mut gram = xc.tr_mul(xc);
    for i in 0..d {
        gram[(i, i)] += alpha;
    }
    let rhs = xc.tr_mul(yc);
    if alpha == 0.0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0_f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min / max < MIN_RCOND {
            return Err(Error::Singular(format!(
                "XᵀX has reciprocal condition {:.3e} at alpha = 0",
                if max > 0.0 { min / max } else { 0.0 }
            )));
        }
    }
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    if alpha == 0.0 {
        return Err(Error::Singular("Cholesky failed at alpha = 0".into()));
    }
    log::debug!("cholesky failed at alpha {alpha}; falling back to pseudoinverse");
    let pinv = gram
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(pinv * rhs)
}

/// Ridge regression of `y` on `x` with penalty `alpha·||T||_F²`.
pub fn fit_ridge(x: &Matrix, y: &Matrix, alpha: f64) -> Result<TransportOperator> {
    check_xy(x, y)?;
    if x.nrows() < 2 {
        return Err(Error::DimensionMismatch("need at least 2 rows to fit".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let x_mean = column_means(x);
    let y_mean = column_means(y);
    let xc = center(x, &x_mean);
    let yc = center(y, &y_mean);
    let w = solve_ridge_system(&xc, &yc, alpha)?;
    let d_out = y.ncols();
    let mut op = TransportOperator {
        t: w.transpose(),
        b: DVector::zeros(d_out),
        rank: x.ncols().min(d_out),
        alpha,
        x_mean,
        y_mean,
        fit_stats: FitStats::default(),
    };
    op.fit_stats.train_r2 = stats::r2_uniform(y, &op.predict_unchecked(x));
    Ok(op)
}

/// Row indices of each fold: a seeded permutation cut into near-equal chunks.
pub fn fold_assignment(n_rows: usize, n_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_folds < 2 {
        return Err(Error::InvalidConfig("need at least 2 folds".into()));
    }
    if n_rows < n_folds {
        return Err(Error::FoldUnderflow {
            rows: n_rows,
            folds: n_folds,
        });
    }
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..n_folds)
        .map(|f| {
            let lo = f * n_rows / n_folds;
            let hi = (f + 1) * n_rows / n_folds;
            let mut fold = perm[lo..hi].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect())
}

/// Complement of `held_out` in `0..n`, both ascending.
fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Grid search over alpha by k-fold cross-validation, then a refit on all rows.
///
/// Ties within 1e-12 go to the larger alpha.
pub fn fit_cv(x: &Matrix, y: &Matrix, cfg: &FitConfig) -> Result<TransportOperator> {
    cfg.validate()?;
    check_xy(x, y)?;
    let folds = fold_assignment(x.nrows(), cfg.n_folds, cfg.fold_seed)?;
    let cells: Vec<(usize, usize)> = (0..cfg.alpha_grid.len())
        .flat_map(|a| (0..folds.len()).map(move |f| (a, f)))
        .collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(a, f)| {
            let test = &folds[f];
            let train = complement(x.nrows(), test);
            let op = fit_ridge(
                &x.select_rows(train.iter()),
                &y.select_rows(train.iter()),
                cfg.alpha_grid[a],
            )?;
            let pred = op.predict_unchecked(&x.select_rows(test.iter()));
            Ok(stats::r2_uniform(&y.select_rows(test.iter()), &pred))
        })
        .collect::<Result<_>>()?;

    let k = folds.len();
    let cv: Vec<AlphaScore> = cfg
        .alpha_grid
        .iter()
        .enumerate()
        .map(|(a, &alpha)| AlphaScore {
            alpha,
            r2: scores[a * k..(a + 1) * k].iter().sum::<f64>() / k as f64,
        })
        .collect();

    let top = cv.iter().map(|s| s.r2).fold(f64::NEG_INFINITY, f64::max);
    let best = cv
        .iter()
        .rposition(|s| s.r2 >= top - 1e-12)
        .expect("grid is non-empty");
    log::debug!("cv selected alpha {} (r2 {:.6})", cv[best].alpha, cv[best].r2);

    let mut op = fit_ridge(x, y, cv[best].alpha)?;
    op.fit_stats.cv_r2_by_alpha = cv;
    op.fit_stats.n_folds = Some(cfg.n_folds);
    op.fit_stats.fold_seed = Some(cfg.fold_seed);
    Ok(op)
}

/// Best rank-`r` approximation of the operator's matrix; bias and means are kept.
pub fn truncate_rank(op: &TransportOperator, r: usize) -> Result<TransportOperator> {
    let full = op.t.nrows().min(op.t.ncols());
    if r == 0 || r > full {
        return Err(Error::OutOfRange(format!("rank {r} not in [1, {full}]")));
    }
    let svd = sorted_svd(&op.t);
    let u = svd.u.columns(0, r);
    let s = Matrix::from_diagonal(&svd.singular_values.rows(0, r).into_owned());
    let vt = svd.v_t.rows(0, r);
    Ok(TransportOperator {
        t: u * s * vt,
        rank: r,
        ..op.clone()
    })
}

impl TransportOperator {
    pub fn d_in(&self) -> usize {
        self.t.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.t.nrows()
    }

    /// Row-wise `t·(x_i − x_mean) + y_mean + b`.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, operator expects {}",
                x.ncols(),
                self.d_in()
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &Matrix) -> Matrix {
        let xc = center(x, &self.x_mean);
        let mut out = xc * self.t.transpose();
        let offset = &self.y_mean + &self.b;
        for (mut col, o) in out.column_iter_mut().zip(offset.iter()) {
            col.add_scalar_mut(*o);
        }
        out
    }

    /// Prediction for a single upstream vector.
    pub fn predict_vector(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "vector has {} entries, operator expects {}",
                v.len(),
                self.d_in()
            )));
        }
        Ok(&self.t * (v - &self.x_mean) + &self.y_mean + &self.b)
    }

    pub fn singular_values(&self) -> Vec<f64> {
        stats::singular_values_desc(&self.t)
    }

    /// Number of singular values above `RANK_TOL · σ_max`.
    pub fn numerical_rank(&self) -> usize {
        let s = self.singular_values();
        let max = s.first().copied().unwrap_or(0.0);
        if max == 0.0 {
            return 0;
        }
        s.iter().filter(|&&v| v > RANK_TOL * max).count()
    }

    /// The stored rank must bound the observed numerical rank.
    pub fn check_rank(&self) -> Result<()> {
        let full = self.d_in().min(self.d_out());
        if self.rank == 0 || self.rank > full {
            return Err(Error::OutOfRange(format!(
                "stored rank {} not in [1, {full}]",
                self.rank
            )));
        }
        let observed = self.numerical_rank();
        if observed > self.rank {
            return Err(Error::Metadata(format!(
                "stored rank {} is below observed numerical rank {observed}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// JSON header of an `.ato` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorHeader {
    pub rank: usize,
    pub alpha: f64,
    pub d_model: usize,
    pub dtype: u32,
    pub fit_stats: FitStats,
}

/// `.ato` layout: magic `ATO1`, version `u32`, header length `u64`, JSON
/// header, then `t` (row-major), `b`, `x_mean`, `y_mean` as f64 LE.
pub fn encode_operator(op: &TransportOperator) -> Result<Vec<u8>> {
    if op.d_in() != op.d_out() {
        return Err(Error::DimensionMismatch("only square operators can be stored".into()));
    }
    let d = op.d_in();
    let header = OperatorHeader {
        rank: op.rank,
        alpha: op.alpha,
        d_model: d,
        dtype: DTYPE_F64_LE,
        fit_stats: op.fit_stats.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + (d * d + 3 * d) * 8);
    out.extend_from_slice(ATO_MAGIC);
    out.extend_from_slice(&ATO_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    encode_f64_rows(&op.t, "t", &mut out)?;
    for (v, name) in [(&op.b, "b"), (&op.x_mean, "x_mean"), (&op.y_mean, "y_mean")] {
        encode_f64_rows(&Matrix::from_row_slice(1, d, v.as_slice()), name, &mut out)?;
    }
    Ok(out)
}

/// Splits an `.ato` file into its parsed header and binary block.
pub fn parse_operator_header(bytes: &[u8]) -> Result<(OperatorHeader, &[u8])> {
    check_magic(bytes, ATO_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 4);
    if version != ATO_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: ATO_VERSION,
        });
    }
    let len = read_u64(bytes, 8);
    let end = 16u64.saturating_add(len);
    if (bytes.len() as u64) < end {
        return Err(Error::Truncated {
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    let header: OperatorHeader = serde_json::from_slice(&bytes[16..end as usize])?;
    Ok((header, &bytes[end as usize..]))
}

/// Structural decode: magic, version, lengths, finiteness, rank range.
///
/// Consistency of the stored rank with the matrix is left to [`TransportOperator::check_rank`].
pub fn decode_operator(bytes: &[u8]) -> Result<TransportOperator> {
    let (header, block) = parse_operator_header(bytes)?;
    let d = header.d_model;
    if d == 0 {
        return Err(Error::Metadata("d_model must be at least 1".into()));
    }
    let width = dtype_width(header.dtype)?;
    let expected = (d * d + 3 * d) * width;
    if block.len() != expected {
        return Err(Error::Truncated {
            expected: (bytes.len() - block.len() + expected) as u64,
            actual: bytes.len() as u64,
        });
    }
    if header.rank == 0 || header.rank > d {
        return Err(Error::OutOfRange(format!(
            "stored rank {} not in [1, {d}]",
            header.rank
        )));
    }
    if !(header.alpha.is_finite() && header.alpha >= 0.0) {
        return Err(Error::Metadata(format!("invalid alpha {}", header.alpha)));
    }
    let (t_bytes, rest) = block.split_at(d * d * width);
    let t = decode_rows(t_bytes, d, d, header.dtype, "t")?;
    let vec_at = |i: usize, name: &str| -> Result<DVector<f64>> {
        let m = decode_rows(&rest[i * d * width..(i + 1) * d * width], 1, d, header.dtype, name)?;
        Ok(DVector::from_iterator(d, m.iter().copied()))
    };
    Ok(TransportOperator {
        t,
        b: vec_at(0, "b")?,
        x_mean: vec_at(1, "x_mean")?,
        y_mean: vec_at(2, "y_mean")?,
        rank: header.rank,
        alpha: header.alpha,
        fit_stats: header.fit_stats,
    })
}

pub fn write_operator(op: &TransportOperator, path: &Path) -> Result<()> {
    atomic_write(path, &encode_operator(op)?)
}

pub fn read_operator(path: &Path) -> Result<TransportOperator> {
    decode_operator(&read_file(path)?)
}
