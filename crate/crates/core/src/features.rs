//! Feature-space evaluation against SAE decoder directions.
//!
//! True and predicted downstream residuals are read out along each decoder
//! row, `a = d_fᵀ v`, and compared on the rows where the true readout counts
//! as activated.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{
    atomic_write, check_magic, decode_rows, encode_f32_rows, ensure_finite, read_file, read_u32,
    read_u64, DTYPE_F32_LE,
};
use crate::Matrix;

pub const FDICT_MAGIC: &[u8; 4] = b"FDC1";
pub const FDICT_VERSION: u32 = 1;

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const DEFAULT_R2_FLOOR: f64 = -1.0;
/// Features scoring above this count as linearly transported.
pub const HIGH_TRANSPORT_R2: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDictionary {
    decoders: Matrix,
    layer: u32,
    feature_ids: Vec<u64>,
    thresholds: Vec<f64>,
    metadata: serde_json::Map<String, serde_json::Value>,
}

impl FeatureDictionary {
    /// `decoders` is `n_features × d_model`, one decoder direction per row.
    pub fn new(
        decoders: Matrix,
        layer: u32,
        feature_ids: Vec<u64>,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let n = decoders.nrows();
        if feature_ids.len() != n || thresholds.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} decoder rows, {} ids, {} thresholds",
                feature_ids.len(),
                thresholds.len()
            )));
        }
        ensure_finite(&decoders, "decoder rows")?;
        if let Some(i) = thresholds.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                what: "thresholds".into(),
                index: i,
            });
        }
        if let Some(r) = (0..n).find(|&r| decoders.row(r).norm() == 0.0) {
            return Err(Error::Metadata(format!("decoder row {r} has zero norm")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = feature_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Metadata(format!("duplicate feature id {dup}")));
        }
        Ok(Self {
            decoders,
            layer,
            feature_ids,
            thresholds,
            metadata: Default::default(),
        })
    }

    /// One feature per residual coordinate, ids `0..d_model`, thresholds 0.
    pub fn identity(d_model: usize, layer: u32) -> Self {
        Self::new(
            Matrix::identity(d_model, d_model),
            layer,
            (0..d_model as u64).collect(),
            vec![0.0; d_model],
        )
        .expect("identity dictionary is valid")
    }

    /// Free-form per-feature annotations carried through the file format.
    pub fn with_metadata(mut self, metadata: serde_json::Map<String, serde_json::Value>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn decoders(&self) -> &Matrix {
        &self.decoders
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn feature_ids(&self) -> &[u64] {
        &self.feature_ids
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn metadata(&self) -> &serde_json::Map<String, serde_json::Value> {
        &self.metadata
    }

    pub fn n_features(&self) -> usize {
        self.decoders.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.decoders.ncols()
    }
}

/// Readouts `v · Dᵀ`, shape `n × n_features`.
pub fn project(dict: &FeatureDictionary, v: &Matrix) -> Result<Matrix> {
    if v.ncols() != dict.d_model() {
        return Err(Error::DimensionMismatch(format!(
            "residuals have {} columns, dictionary expects {}",
            v.ncols(),
            dict.d_model()
        )));
    }
    Ok(v * dict.decoders.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature_id: u64,
    pub n_activated: usize,
    pub r2: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// Fewer activated rows than required.
    TooFewActivations(usize),
    /// True readouts on activated rows are constant.
    ConstantActivation,
    /// R² did not exceed the floor.
    BelowFloor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkippedFeature {
    pub feature_id: u64,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureScoring {
    /// Retained features, in dictionary order.
    pub scores: Vec<FeatureScore>,
    pub skipped: Vec<SkippedFeature>,
}

fn score_one(truth: &[f64], pred: &[f64], threshold: f64) -> (usize, Option<(f64, f64)>) {
    let active: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > threshold)
        .map(|(t, p)| (*t, *p))
        .collect();
    let n = active.len();
    if n == 0 {
        return (0, None);
    }
    let mean = active.iter().map(|(t, _)| t).sum::<f64>() / n as f64;
    let ss_tot: f64 = active.iter().map(|(t, _)| (t - mean).powi(2)).sum();
    let ss_res: f64 = active.iter().map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return (n, None);
    }
    (n, Some((1.0 - ss_res / ss_tot, ss_res / n as f64)))
}

/// Per-feature R² and MSE on activated rows, filtered by activation count and R² floor.
pub fn score_features(
    a_true: &Matrix,
    a_pred: &Matrix,
    dict: &FeatureDictionary,
    min_count: usize,
    r2_floor: f64,
) -> Result<FeatureScoring> {
    if a_true.shape() != a_pred.shape() {
        return Err(Error::DimensionMismatch(format!(
            "true readouts {:?} vs predicted {:?}",
            a_true.shape(),
            a_pred.shape()
        )));
    }
    if a_true.ncols() != dict.n_features() {
        return Err(Error::DimensionMismatch(format!(
            "{} readout columns for {} features",
            a_true.ncols(),
            dict.n_features()
        )));
    }
    let results: Vec<std::result::Result<FeatureScore, SkippedFeature>> = (0..dict.n_features())
        .into_par_iter()
        .map(|f| {
            let feature_id = dict.feature_ids[f];
            let skip = |reason| Err(SkippedFeature { feature_id, reason });
            let (n, fit) = score_one(
                a_true.column(f).as_slice(),
                a_pred.column(f).as_slice(),
                dict.thresholds[f],
            );
            if n < min_count {
                return skip(SkipReason::TooFewActivations(n));
            }
            match fit {
                None => skip(SkipReason::ConstantActivation),
                Some((r2, _)) if !(r2 > r2_floor) => skip(SkipReason::BelowFloor),
                Some((r2, mse)) => Ok(FeatureScore {
                    feature_id,
                    n_activated: n,
                    r2,
                    mse,
                }),
            }
        })
        .collect();
    let mut out = FeatureScoring::default();
    for r in results {
        match r {
            Ok(s) => out.scores.push(s),
            Err(s) => {
                if s.reason == SkipReason::ConstantActivation {
                    log::info!("feature {} skipped: constant activation", s.feature_id);
                }
                out.skipped.push(s);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct R2Histogram {
    pub bin_edges: Vec<f64>,
    /// `counts[i]` covers `[edges[i], edges[i+1])`; the last bin is closed.
    pub counts: Vec<usize>,
    pub below_range: usize,
    pub above_range: usize,
    /// Features with R² above [`HIGH_TRANSPORT_R2`].
    pub high_transport: usize,
    pub total: usize,
}

pub fn r2_histogram(scores: &[FeatureScore], bin_edges: &[f64]) -> Result<R2Histogram> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "bin edges must be at least two strictly increasing values".into(),
        ));
    }
    let bins = bin_edges.len() - 1;
    let last = bin_edges[bins];
    let mut h = R2Histogram {
        bin_edges: bin_edges.to_vec(),
        counts: vec![0; bins],
        below_range: 0,
        above_range: 0,
        high_transport: 0,
        total: scores.len(),
    };
    for s in scores {
        if s.r2 > HIGH_TRANSPORT_R2 {
            h.high_transport += 1;
        }
        if s.r2 < bin_edges[0] {
            h.below_range += 1;
        } else if s.r2 > last {
            h.above_range += 1;
        } else if s.r2 == last {
            h.counts[bins - 1] += 1;
        } else {
            // first edge strictly greater than r2, minus one
            let i = bin_edges.partition_point(|e| *e <= s.r2) - 1;
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// `feature_id,n_activated,r2,mse` CSV, LF line endings.
pub fn scores_to_csv(scores: &[FeatureScore]) -> String {
    let mut out = String::from("feature_id,n_activated,r2,mse\n");
    for s in scores {
        let _ = writeln!(out, "{},{},{},{}", s.feature_id, s.n_activated, s.r2, s.mse);
    }
    out
}

/// JSON header of an `.fdict` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryHeader {
    pub layer: u32,
    pub n_features: usize,
    pub d_model: usize,
    pub dtype: u32,
    pub feature_ids: Vec<u64>,
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// `.fdict` layout: magic `FDC1`, version `u32`, header length `u64`, JSON
/// header, then decoder rows as f32 LE, row-major.
pub fn encode_dictionary(dict: &FeatureDictionary) -> Result<Vec<u8>> {
    let header = DictionaryHeader {
        layer: dict.layer,
        n_features: dict.n_features(),
        d_model: dict.d_model(),
        dtype: DTYPE_F32_LE,
        feature_ids: dict.feature_ids.clone(),
        thresholds: dict.thresholds.clone(),
        metadata: dict.metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + dict.decoders.len() * 4);
    out.extend_from_slice(FDICT_MAGIC);
    out.extend_from_slice(&FDICT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    encode_f32_rows(&dict.decoders, "decoder rows", &mut out)?;
    Ok(out)
}

pub fn decode_dictionary(bytes: &[u8]) -> Result<FeatureDictionary> {
    check_magic(bytes, FDICT_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 4);
    if version != FDICT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FDICT_VERSION,
        });
    }
    let end = 16u64.saturating_add(read_u64(bytes, 8));
    if (bytes.len() as u64) < end {
        return Err(Error::Truncated {
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    let header: DictionaryHeader = serde_json::from_slice(&bytes[16..end as usize])?;
    if header.dtype != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    let block = &bytes[end as usize..];
    let expected = header.n_features * header.d_model * 4;
    if block.len() != expected {
        return Err(Error::Truncated {
            expected: end + expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let decoders = decode_rows(block, header.n_features, header.d_model, DTYPE_F32_LE, "decoder rows")?;
    let dict = FeatureDictionary::new(decoders, header.layer, header.feature_ids, header.thresholds)?;
    Ok(dict.with_metadata(header.metadata))
}

pub fn write_dictionary(dict: &FeatureDictionary, path: &Path) -> Result<()> {
    atomic_write(path, &encode_dictionary(dict)?)
}

pub fn read_dictionary(path: &Path) -> Result<FeatureDictionary> {
    decode_dictionary(&read_file(path)?)
}
