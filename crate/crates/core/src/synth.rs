//! Synthetic pairsets with a planted low-rank linear transport map.
//!
//! The downstream matrix is split into three coordinate blocks:
//!
//! * transported coordinates `0..s`: `Y = X·Aᵀ + ε`, with `A = g·Σ u_i v_iᵀ`;
//! * synthesised coordinates `s..s+n_synth`: a sign-modulated `tanh` of a hidden
//!   linear mix of `X`, only partly linearly predictable;
//! * the remaining coordinates: independent `N(0, σ²)` noise.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::ActivationPairset;
use crate::Matrix;

/// Gain inside the `tanh` of synthesised coordinates.
pub const SYNTH_TANH_GAIN: f64 = 1.5;
/// Probability that a synthesised value has its sign flipped.
pub const SYNTH_FLIP_PROB: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub d_model: usize,
    pub n_rows: usize,
    pub transport_rank: usize,
    pub transport_gain: f64,
    pub noise_sigma: f64,
    pub n_synth_dims: usize,
    pub seed: u64,
}

impl PlantConfig {
    /// Noiseless, fully transported configuration with unit gain.
    pub fn new(d_model: usize, n_rows: usize, transport_rank: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_rows,
            transport_rank,
            transport_gain: 1.0,
            noise_sigma: 0.0,
            n_synth_dims: 0,
            seed,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_synth_dims(mut self, n: usize) -> Self {
        self.n_synth_dims = n;
        self
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.transport_gain = gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::InvalidConfig("d_model must be at least 1".into()));
        }
        if self.transport_rank + self.n_synth_dims > self.d_model {
            return Err(Error::InvalidConfig(format!(
                "rank {} + synth dims {} exceeds d_model {}",
                self.transport_rank, self.n_synth_dims, self.d_model
            )));
        }
        if !(self.transport_gain.is_finite() && self.transport_gain > 0.0) {
            return Err(Error::InvalidConfig("transport_gain must be > 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground truth of a generated pairset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantTruth {
    /// Planted map, `d_model × d_model`, rank `s`, all nonzero singular values equal the gain.
    pub a: Matrix,
    pub transported_dims: Vec<usize>,
    pub synth_dims: Vec<usize>,
    /// Population linear R² of any synthesised coordinate given `X`.
    pub synth_linear_r2: f64,
}

impl PlantTruth {
    pub fn rank(&self) -> usize {
        self.transported_dims.len()
    }

    /// The `{"rank", "transported_dims", "synth_dims"}` JSON document.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rank": self.rank(),
            "transported_dims": self.transported_dims,
            "synth_dims": self.synth_dims,
        })
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    // filled row by row so the stream order is independent of storage order
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// `rows × cols` matrix with orthonormal columns (`cols ≤ rows`).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let g = gaussian_matrix(rng, rows, cols);
    let qr = g.qr();
    let q = qr.q();
    q.columns(0, cols).into_owned()
}

/// `E[f(h)]` for `h ~ N(0, 1)` by composite Simpson quadrature on `[-12, 12]`.
fn gaussian_expectation(f: impl Fn(f64) -> f64) -> f64 {
    let n = 4800;
    let (lo, hi) = (-12.0_f64, 12.0_f64);
    let step = (hi - lo) / n as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let g = |h: f64| f(h) * (-0.5 * h * h).exp() / norm;
    let mut acc = g(lo) + g(hi);
    for i in 1..n {
        let h = lo + i as f64 * step;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(h);
    }
    acc * step / 3.0
}

/// Population linear R² of `m·tanh(γh)` on `h`, where `m = ±1` flips w.p. `SYNTH_FLIP_PROB`.
///
/// The best linear predictor from Gaussian `X` only uses the hidden direction,
/// so this is also the ceiling for prediction from the full `X`.
pub fn synth_linear_r2() -> f64 {
    let g = SYNTH_TANH_GAIN;
    let cross = gaussian_expectation(|h| h * (g * h).tanh());
    let power = gaussian_expectation(|h| (g * h).tanh().powi(2));
    let bias = 1.0 - 2.0 * SYNTH_FLIP_PROB;
    bias * bias * cross * cross / power
}

pub fn generate_planted(cfg: &PlantConfig) -> Result<(ActivationPairset, PlantTruth)> {
    cfg.validate()?;
    let d = cfg.d_model;
    let n = cfg.n_rows;
    let s = cfg.transport_rank;
    let n_synth = cfg.n_synth_dims;
    if n < 4 * d {
        log::warn!("generating {n} rows for d_model {d}; at least {} recommended", 4 * d);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let x = gaussian_matrix(&mut rng, n, d);

    // A = g · U_emb · Vᵀ, with U_emb supported on the transported coordinates
    let mut a = Matrix::zeros(d, d);
    if s > 0 {
        let v = orthonormal_columns(&mut rng, d, s);
        let u = orthonormal_columns(&mut rng, s, s);
        let block = (&u * v.transpose()) * cfg.transport_gain;
        a.view_mut((0, 0), (s, d)).copy_from(&block);
    }

    let mut y = Matrix::zeros(n, d);
    if s > 0 {
        let signal = &x * a.rows(0, s).transpose();
        y.columns_mut(0, s).copy_from(&signal);
        if cfg.noise_sigma > 0.0 {
            let eps = gaussian_matrix(&mut rng, n, s) * cfg.noise_sigma;
            y.columns_mut(0, s).zip_apply(&eps, |v, e| *v += e);
        }
    }

    if n_synth > 0 {
        let variance = cfg.transport_gain.powi(2) + cfg.noise_sigma.powi(2);
        let power = gaussian_expectation(|h| (SYNTH_TANH_GAIN * h).tanh().powi(2));
        let scale = (variance / power).sqrt();
        let mut mix = gaussian_matrix(&mut rng, d, n_synth);
        for mut col in mix.column_iter_mut() {
            let norm = col.norm();
            col /= norm;
        }
        let hidden = &x * &mix;
        for r in 0..n {
            for j in 0..n_synth {
                let flip = rng.random_bool(SYNTH_FLIP_PROB);
                let sign = if flip { -1.0 } else { 1.0 };
                y[(r, s + j)] = sign * scale * (SYNTH_TANH_GAIN * hidden[(r, j)]).tanh();
            }
        }
    }

    let rest = d - s - n_synth;
    if rest > 0 && cfg.noise_sigma > 0.0 {
        let noise = gaussian_matrix(&mut rng, n, rest) * cfg.noise_sigma;
        y.columns_mut(s + n_synth, rest).copy_from(&noise);
    }

    let truth = PlantTruth {
        a,
        transported_dims: (0..s).collect(),
        synth_dims: (s..s + n_synth).collect(),
        synth_linear_r2: synth_linear_r2(),
    };
    let pairs = ActivationPairset::from_matrices(x, y, 0, 1, "synthetic", Some(cfg.seed))?;
    Ok((pairs, truth))
}

/// Singular values of the planted map, largest first.
pub fn planted_spectrum(truth: &PlantTruth) -> DVector<f64> {
    DVector::from_vec(crate::stats::singular_values_desc(&truth.a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ols_r2_column(x: &Matrix, y: &Matrix, col: usize) -> f64 {
        // independent per-column OLS with intercept via normal equations
        let n = x.nrows();
        let mut design = Matrix::from_element(n, x.ncols() + 1, 1.0);
        design.columns_mut(1, x.ncols()).copy_from(x);
        let target = y.column(col).into_owned();
        let gram = design.tr_mul(&design);
        let rhs = design.tr_mul(&target);
        let beta = gram.lu().solve(&rhs).unwrap();
        let pred = &design * beta;
        crate::stats::r2_score(target.as_slice(), pred.as_slice())
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_planted(&PlantConfig::new(4, 16, 3, 0).with_synth_dims(2)).is_err());
        assert!(generate_planted(&PlantConfig::new(4, 16, 2, 0).with_gain(0.0)).is_err());
        assert!(generate_planted(&PlantConfig::new(4, 16, 2, 0).with_noise(-1.0)).is_err());
        assert!(generate_planted(&PlantConfig::new(0, 16, 0, 0)).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = PlantConfig::new(6, 40, 3, 11).with_noise(0.2).with_synth_dims(2);
        let (a, ta) = generate_planted(&cfg).unwrap();
        let (b, tb) = generate_planted(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_planted(&PlantConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn planted_rank_is_exact() {
        for s in [0, 1, 3, 8] {
            let (_, truth) = generate_planted(&PlantConfig::new(8, 64, s, 5).with_gain(2.0)).unwrap();
            let sv = planted_spectrum(&truth);
            let above = sv.iter().filter(|&&v| v > 1e-8).count();
            assert_eq!(above, s);
            for v in sv.iter().take(s) {
                assert!((v - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_full_rank_is_exactly_linear() {
        let (p, truth) = generate_planted(&PlantConfig::new(8, 512, 8, 1)).unwrap();
        let expected = p.x() * truth.a.transpose();
        assert!((p.y() - expected).abs().max() < 1e-12);
        // least-squares recovery of A
        let gram = p.x().tr_mul(p.x());
        let rhs = p.x().tr_mul(p.y());
        let at = gram.lu().solve(&rhs).unwrap();
        assert!((at.transpose() - &truth.a).abs().max() < 1e-5);
    }

    #[test]
    fn synthesised_dims_are_partly_predictable() {
        let cfg = PlantConfig::new(8, 4096, 4, 2).with_synth_dims(4);
        let (p, truth) = generate_planted(&cfg).unwrap();
        for &j in &truth.transported_dims {
            assert!(ols_r2_column(p.x(), p.y(), j) > 1.0 - 1e-9);
        }
        for &j in &truth.synth_dims {
            let r2 = ols_r2_column(p.x(), p.y(), j);
            assert!(r2 > 0.05 && r2 < 0.5, "synth dim {j}: r2 {r2}");
            assert!((r2 - truth.synth_linear_r2).abs() < 0.06, "r2 {r2} vs {}", truth.synth_linear_r2);
        }
    }

    #[test]
    fn synth_ceiling_is_sub_unit() {
        let c = synth_linear_r2();
        assert!(c > 0.1 && c < 0.5, "{c}");
    }

    #[test]
    fn synth_variance_matches_transported() {
        let cfg = PlantConfig::new(8, 20000, 4, 9).with_synth_dims(4).with_gain(1.5);
        let (p, truth) = generate_planted(&cfg).unwrap();
        let var = |j: usize| {
            let c = p.y().column(j);
            let m = c.mean();
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64
        };
        for &j in &truth.synth_dims {
            assert!((var(j) - 2.25).abs() < 0.1, "dim {j}: {}", var(j));
        }
    }

    #[test]
    fn remaining_dims_are_noise_at_sigma() {
        let cfg = PlantConfig::new(8, 8000, 2, 3).with_noise(0.5);
        let (p, _) = generate_planted(&cfg).unwrap();
        let c = p.y().column(7);
        let var = c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
        assert!((var - 0.25).abs() < 0.02);
        let zero = generate_planted(&PlantConfig::new(8, 100, 2, 3)).unwrap().0;
        assert!(zero.y().column(7).iter().all(|&v| v == 0.0));
    }
}
