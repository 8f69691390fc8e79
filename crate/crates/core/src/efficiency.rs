//! Whitening, canonical correlations and transport efficiency.
//!
//! With `Ỹ = Yc·Σ_YY^{-1/2}` and `X̃ = Xc·Σ_XX^{-1/2}`, the whitened
//! cross-covariance `C = Σ_YY^{-1/2} Σ_YX Σ_XX^{-1/2}` has the canonical
//! correlations `ρ_i` as singular values. No rank-`r` linear predictor can
//! explain more than `(1/d)·Σ_{i≤r} ρ_i²` of the whitened variance of `Y`;
//! transport efficiency is an operator's whitened R² over that ceiling.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operator::{fit_cv, truncate_rank, FitConfig, TransportOperator};
use crate::stats::{center, column_means, covariance, inv_sqrt_psd, singular_values_desc};
use crate::tensor_io::{ensure_finite, ActivationPairset};
use crate::Matrix;

/// Eigenvalues of the regularised covariance are clamped below at this value.
pub const EIG_FLOOR: f64 = 1e-10;
/// Ceilings below this leave the efficiency undefined.
pub const MIN_CEILING: f64 = 0.01;

/// Ridge added to a covariance before taking its inverse square root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovEps {
    Absolute(f64),
    /// Multiple of `trace(cov) / d`.
    RelativeTrace(f64),
}

impl Default for CovEps {
    fn default() -> Self {
        CovEps::RelativeTrace(1e-8)
    }
}

impl From<f64> for CovEps {
    fn from(eps: f64) -> Self {
        CovEps::Absolute(eps)
    }
}

impl CovEps {
    fn resolve(self, cov: &Matrix) -> Result<f64> {
        let eps = match self {
            CovEps::Absolute(e) => e,
            CovEps::RelativeTrace(f) => f * cov.trace() / cov.nrows().max(1) as f64,
        };
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::InvalidConfig(format!("covariance eps must be >= 0, got {eps}")));
        }
        Ok(eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: DVector<f64>,
    /// Symmetric `(cov + eps·I)^{-1/2}`.
    pub w: Matrix,
    pub eps: f64,
}

impl Whitener {
    /// `(m − mean)·w`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.ncols() != self.w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} columns for a {}-dimensional whitener",
                m.ncols(),
                self.w.nrows()
            )));
        }
        Ok(center(m, &self.mean) * &self.w)
    }
}

pub fn fit_whitener(m: &Matrix, eps: impl Into<CovEps>) -> Result<Whitener> {
    if m.nrows() < 2 {
        return Err(Error::DimensionMismatch("whitening needs at least 2 rows".into()));
    }
    ensure_finite(m, "whitener input")?;
    let mean = column_means(m);
    let cov = covariance(&center(m, &mean));
    let eps = eps.into().resolve(&cov)?;
    Ok(Whitener {
        w: inv_sqrt_psd(&cov, eps, EIG_FLOOR),
        mean,
        eps,
    })
}

/// Canonical correlations of `x` and `y`, descending, clamped to `[0, 1]`.
pub fn canonical_correlations(x: &Matrix, y: &Matrix, eps: impl Into<CovEps>) -> Result<Vec<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} rows, y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let eps = eps.into();
    if x.nrows() <= x.ncols().max(y.ncols()) {
        log::warn!(
            "canonical correlations from {} rows in {} dimensions are unreliable",
            x.nrows(),
            x.ncols().max(y.ncols())
        );
    }
    let wx = fit_whitener(x, eps)?;
    let wy = fit_whitener(y, eps)?;
    let n = x.nrows() as f64;
    let cross = center(y, &wy.mean).tr_mul(&center(x, &wx.mean)) / n;
    let c = &wy.w * cross * &wx.w;
    Ok(singular_values_desc(&c)
        .into_iter()
        .map(|r| r.clamp(0.0, 1.0))
        .collect())
}

/// `(1/d_model)·Σ_{i≤r} ρ_i²`.
pub fn r2_ceiling(rho: &[f64], r: usize, d_model: usize) -> Result<f64> {
    if r == 0 || r > d_model {
        return Err(Error::OutOfRange(format!("rank {r} not in [1, {d_model}]")));
    }
    Ok(rho.iter().take(r).map(|p| p * p).sum::<f64>() / d_model as f64)
}

/// Fraction of whitened variance of `y_true` explained by `y_pred`.
pub fn whitened_r2(y_pred: &Matrix, y_true: &Matrix, wh: &Whitener) -> Result<f64> {
    if y_pred.shape() != y_true.shape() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs truth {:?}",
            y_pred.shape(),
            y_true.shape()
        )));
    }
    if y_true.ncols() != wh.w.nrows() {
        return Err(Error::DimensionMismatch("whitener dimension differs from y".into()));
    }
    let residual = (y_true - y_pred) * &wh.w;
    let total = wh.apply(y_true)?;
    let denom = total.norm_squared();
    if denom <= 0.0 {
        return Err(Error::Degenerate("zero whitened total variance".into()));
    }
    Ok(1.0 - residual.norm_squared() / denom)
}

/// Participation ratio `(Σρ²)² / Σρ⁴`; 0 if every ρ is 0.
pub fn effective_dim(rho: &[f64]) -> f64 {
    let s2: f64 = rho.iter().map(|p| p * p).sum();
    let s4: f64 = rho.iter().map(|p| p.powi(4)).sum();
    if s4 == 0.0 {
        0.0
    } else {
        s2 * s2 / s4
    }
}

/// `start, start+step, …` up to `d_model`, then `d_model` itself.
pub fn rank_grid(start: usize, step: usize, d_model: usize) -> Result<Vec<usize>> {
    if start == 0 || step == 0 || start > d_model {
        return Err(Error::InvalidConfig(format!(
            "rank grid {start}:{step} invalid for d_model {d_model}"
        )));
    }
    let mut ranks: Vec<usize> = (start..=d_model).step_by(step).collect();
    if ranks.last() != Some(&d_model) {
        ranks.push(d_model);
    }
    Ok(ranks)
}

/// `1, 51, 101, …, d_model`.
pub fn default_rank_grid(d_model: usize) -> Result<Vec<usize>> {
    rank_grid(1, 50, d_model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub rho: Vec<f64>,
    pub ranks: Vec<usize>,
    pub ceiling: Vec<f64>,
    pub whitened_r2: Vec<f64>,
    /// Unclamped `whitened_r2 / ceiling`; absent where the ceiling is below [`MIN_CEILING`].
    pub raw_efficiency: Vec<Option<f64>>,
    /// `raw_efficiency` clamped to `[0, 1]`.
    pub efficiency: Vec<Option<f64>>,
    pub d_eff: f64,
    pub alpha: f64,
    pub flags: Vec<String>,
}

impl EfficiencyReport {
    /// `rank,ceiling,whitened_r2,efficiency`; undefined efficiencies are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,ceiling,whitened_r2,efficiency\n");
        for i in 0..self.ranks.len() {
            let eff = self.efficiency[i].map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.ranks[i], self.ceiling[i], self.whitened_r2[i], eff
            );
        }
        out
    }

    pub fn efficiency_at(&self, rank: usize) -> Option<f64> {
        let i = self.ranks.iter().position(|&r| r == rank)?;
        self.efficiency[i]
    }
}

/// Efficiency curve of an already fitted full-rank operator.
///
/// The whitener and canonical correlations come from `train`; whitened R² is
/// measured on `eval`.
pub fn efficiency_curve_for_operator(
    op: &TransportOperator,
    train: &ActivationPairset,
    eval: &ActivationPairset,
    ranks: &[usize],
    eps: CovEps,
) -> Result<EfficiencyReport> {
    let d = train.d_model();
    if eval.d_model() != d || op.d_in() != d || op.d_out() != d {
        return Err(Error::DimensionMismatch(
            "train, eval and operator dimensions must agree".into(),
        ));
    }
    if ranks.is_empty() {
        return Err(Error::InvalidConfig("rank list is empty".into()));
    }
    if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > d) {
        return Err(Error::OutOfRange(format!("rank {r} not in [1, {d}]")));
    }
    let wh = fit_whitener(train.y(), eps)?;
    let rho = canonical_correlations(train.x(), train.y(), eps)?;

    let cells: Vec<(f64, f64)> = ranks
        .par_iter()
        .map(|&r| {
            let truncated = truncate_rank(op, r)?;
            let pred = truncated.predict(eval.x())?;
            Ok((r2_ceiling(&rho, r, d)?, whitened_r2(&pred, eval.y(), &wh)?))
        })
        .collect::<Result<_>>()?;

    let mut report = EfficiencyReport {
        d_eff: effective_dim(&rho),
        rho,
        ranks: ranks.to_vec(),
        ceiling: Vec::with_capacity(ranks.len()),
        whitened_r2: Vec::with_capacity(ranks.len()),
        raw_efficiency: Vec::with_capacity(ranks.len()),
        efficiency: Vec::with_capacity(ranks.len()),
        alpha: op.alpha,
        flags: Vec::new(),
    };
    for (&r, (ceiling, wr2)) in ranks.iter().zip(cells) {
        report.ceiling.push(ceiling);
        report.whitened_r2.push(wr2);
        if ceiling < MIN_CEILING {
            report
                .flags
                .push(format!("rank {r}: ceiling below {MIN_CEILING}: efficiency undefined"));
            report.raw_efficiency.push(None);
            report.efficiency.push(None);
        } else {
            let raw = wr2 / ceiling;
            report.raw_efficiency.push(Some(raw));
            report.efficiency.push(Some(raw.clamp(0.0, 1.0)));
        }
    }
    Ok(report)
}

/// Fits a cross-validated operator on `train` and evaluates it at each rank.
pub fn efficiency_curve(
    train: &ActivationPairset,
    eval: &ActivationPairset,
    fit_cfg: &FitConfig,
    ranks: &[usize],
) -> Result<EfficiencyReport> {
    let op = fit_cv(train.x(), train.y(), fit_cfg)?;
    efficiency_curve_for_operator(&op, train, eval, ranks, CovEps::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_whitener() {
        // columns with variance 4 and zero covariance
        let m = Matrix::from_row_slice(4, 2, &[2.0, 2.0, -2.0, 2.0, 2.0, -2.0, -2.0, -2.0]);
        let wh = fit_whitener(&m, 0.0).unwrap();
        assert!((&wh.w - Matrix::identity(2, 2) * 0.5).abs().max() < 1e-12);
    }

    #[test]
    fn duplicated_column_stays_finite() {
        let m = Matrix::from_fn(50, 3, |r, c| {
            let base = ((r * 37) % 11) as f64 - 5.0;
            if c == 2 {
                base
            } else {
                base * (c as f64 + 1.0) + ((r * 13 + c) % 7) as f64
            }
        });
        let mut m = m;
        let first = m.column(0).into_owned();
        m.set_column(2, &first);
        let wh = fit_whitener(&m, 1e-6).unwrap();
        assert!(wh.w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ceiling_formula() {
        assert_eq!(r2_ceiling(&[1.0, 1.0], 1, 2).unwrap(), 0.5);
        assert_eq!(r2_ceiling(&[1.0, 1.0], 2, 2).unwrap(), 1.0);
        assert_eq!(r2_ceiling(&[0.0, 0.0, 0.0], 3, 3).unwrap(), 0.0);
        assert!(r2_ceiling(&[1.0], 0, 1).is_err());
        assert!(r2_ceiling(&[1.0], 2, 1).is_err());
    }

    #[test]
    fn participation_ratio() {
        assert!((effective_dim(&[1.0, 1.0, 0.0]) - 2.0).abs() < 1e-15);
        let rho = [0.9f64.sqrt(), 0.1f64.sqrt()];
        assert!((effective_dim(&rho) - 1.0 / 0.82).abs() < 1e-12);
        assert_eq!(effective_dim(&[0.0, 0.0]), 0.0);
        assert_eq!(effective_dim(&[]), 0.0);
    }

    #[test]
    fn rank_grids() {
        assert_eq!(rank_grid(1, 50, 120).unwrap(), vec![1, 51, 101, 120]);
        assert_eq!(rank_grid(1, 50, 101).unwrap(), vec![1, 51, 101]);
        assert_eq!(default_rank_grid(8).unwrap(), vec![1, 8]);
        assert_eq!(rank_grid(1, 1, 3).unwrap(), vec![1, 2, 3]);
        assert!(rank_grid(0, 5, 10).is_err());
        assert!(rank_grid(11, 5, 10).is_err());
    }

    #[test]
    fn whitened_r2_baselines() {
        let y = Matrix::from_fn(40, 3, |r, c| (((r + 1) * (c + 3) * 7919) % 23) as f64);
        let wh = fit_whitener(&y, CovEps::default()).unwrap();
        assert!((whitened_r2(&y, &y, &wh).unwrap() - 1.0).abs() < 1e-15);
        let means = column_means(&y);
        let null = Matrix::from_fn(40, 3, |_, c| means[c]);
        assert!(whitened_r2(&null, &y, &wh).unwrap().abs() < 1e-9);
        let flat = Matrix::from_element(5, 3, 1.0);
        let wh_flat = Whitener {
            mean: DVector::from_element(3, 1.0),
            w: Matrix::identity(3, 3),
            eps: 0.0,
        };
        assert!(matches!(whitened_r2(&flat, &flat, &wh_flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn csv_omits_undefined_efficiency() {
        let report = EfficiencyReport {
            rho: vec![0.1],
            ranks: vec![1],
            ceiling: vec![0.005],
            whitened_r2: vec![-0.01],
            raw_efficiency: vec![None],
            efficiency: vec![None],
            d_eff: 1.0,
            alpha: 1.0,
            flags: vec![],
        };
        assert_eq!(report.to_csv(), "rank,ceiling,whitened_r2,efficiency\n1,0.005,-0.01,\n");
    }
}
