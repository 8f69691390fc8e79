//! Binary activation dumps (ATD v1), their JSON sidecar, and row splitting.
//!
//! Layout of an ATD v1 file, all integers little-endian:
//!
//! | bytes   | content                         |
//! |---------|---------------------------------|
//! | 0..4    | magic `ATD1`                    |
//! | 4..8    | version, `u32` = 1              |
//! | 8..16   | `n_rows`, `u64`                 |
//! | 16..20  | `d_model`, `u32`                |
//! | 20..24  | dtype, `u32` (1 = f32 LE)       |
//! | 24..    | X row-major, then Y row-major   |
//!
//! The sidecar lives at `<path>.meta.json` and carries [`PairsetMeta`].
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

pub const ATD_MAGIC: &[u8; 4] = b"ATD1";
pub const ATD_VERSION: u32 = 1;
pub const ATD_HEADER_LEN: usize = 24;

/// Dtype code for little-endian IEEE-754 binary32.
pub const DTYPE_F32_LE: u32 = 1;
/// Dtype code for little-endian IEEE-754 binary64.
pub const DTYPE_F64_LE: u32 = 2;

/// Pairing rule between upstream and downstream token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JPolicy {
    SameToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsetMeta {
    pub source_layer: u32,
    pub leap: u32,
    pub j_policy: JPolicy,
    pub d_model: usize,
    pub n_rows: usize,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl PairsetMeta {
    pub fn target_layer(&self) -> u32 {
        self.source_layer + self.leap
    }
}

/// Paired upstream (`x`) and downstream (`y`) residual matrices.
///
/// Row `i` of `x` and row `i` of `y` come from the same sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPairset {
    x: Matrix,
    y: Matrix,
    meta: PairsetMeta,
}

impl ActivationPairset {
    pub fn new(x: Matrix, y: Matrix, meta: PairsetMeta) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::DimensionMismatch(format!(
                "x is {}x{} but y is {}x{}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("d_model must be at least 1".into()));
        }
        if meta.d_model != x.ncols() || meta.n_rows != x.nrows() {
            return Err(Error::Metadata(format!(
                "meta says {}x{}, matrices are {}x{}",
                meta.n_rows,
                meta.d_model,
                x.nrows(),
                x.ncols()
            )));
        }
        if meta.leap == 0 {
            return Err(Error::Metadata("leap must be at least 1".into()));
        }
        ensure_finite(&x, "x")?;
        ensure_finite(&y, "y")?;
        Ok(Self { x, y, meta })
    }

    /// Builds the metadata from the matrix shapes.
    pub fn from_matrices(
        x: Matrix,
        y: Matrix,
        source_layer: u32,
        leap: u32,
        provenance: impl Into<String>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let meta = PairsetMeta {
            source_layer,
            leap,
            j_policy: JPolicy::SameToken,
            d_model: x.ncols(),
            n_rows: x.nrows(),
            provenance: provenance.into(),
            seed,
        };
        Self::new(x, y, meta)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn meta(&self) -> &PairsetMeta {
        &self.meta
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.x.ncols()
    }

    /// New pairset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let x = self.x.select_rows(rows.iter());
        let y = self.y.select_rows(rows.iter());
        let meta = PairsetMeta {
            n_rows: rows.len(),
            ..self.meta.clone()
        };
        Self { x, y, meta }
    }

    pub fn into_parts(self) -> (Matrix, Matrix, PairsetMeta) {
        (self.x, self.y, self.meta)
    }
}

/// Fails on the first NaN or infinity, reporting its row-major index.
pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    what: what.to_string(),
                    index: r * m.ncols() + c,
                });
            }
        }
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Appends `m` row-major as f32 LE. Values that overflow f32 are refused.
pub fn encode_f32_rows(m: &Matrix, what: &str, out: &mut Vec<u8>) -> Result<()> {
    out.reserve(m.nrows() * m.ncols() * 4);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)] as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: what.to_string(),
                    index: r * m.ncols() + c,
                });
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Appends `m` row-major as f64 LE.
pub fn encode_f64_rows(m: &Matrix, what: &str, out: &mut Vec<u8>) -> Result<()> {
    ensure_finite(m, what)?;
    out.reserve(m.nrows() * m.ncols() * 8);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    Ok(())
}

/// Decodes a row-major block of `rows x cols` values of the given dtype.
///
/// `bytes` must hold exactly the block.
pub fn decode_rows(bytes: &[u8], rows: usize, cols: usize, dtype: u32, what: &str) -> Result<Matrix> {
    let width = dtype_width(dtype)?;
    let expected = rows * cols * width;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut m = Matrix::zeros(rows, cols);
    for (i, chunk) in bytes.chunks_exact(width).enumerate() {
        let v = match dtype {
            DTYPE_F32_LE => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(chunk.try_into().unwrap()),
        };
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: what.to_string(),
                index: i,
            });
        }
        m[(i / cols, i % cols)] = v;
    }
    Ok(m)
}

pub fn dtype_width(dtype: u32) -> Result<usize> {
    match dtype {
        DTYPE_F32_LE => Ok(4),
        DTYPE_F64_LE => Ok(8),
        other => Err(Error::UnsupportedDtype(other)),
    }
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub(crate) fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Fixed-size header of an ATD file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtdHeader {
    pub version: u32,
    pub n_rows: u64,
    pub d_model: u32,
    pub dtype: u32,
}

impl AtdHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, ATD_MAGIC)?;
        if bytes.len() < ATD_HEADER_LEN {
            return Err(Error::Truncated {
                expected: ATD_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = read_u32(bytes, 4);
        if version != ATD_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: ATD_VERSION,
            });
        }
        let header = Self {
            version,
            n_rows: read_u64(bytes, 8),
            d_model: read_u32(bytes, 16),
            dtype: read_u32(bytes, 20),
        };
        if header.dtype != DTYPE_F32_LE {
            return Err(Error::UnsupportedDtype(header.dtype));
        }
        Ok(header)
    }

    /// Total file length implied by the header.
    pub fn expected_len(&self) -> u64 {
        ATD_HEADER_LEN as u64 + 2 * self.n_rows * self.d_model as u64 * 4
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(ATD_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.n_rows.to_le_bytes());
        out.extend_from_slice(&self.d_model.to_le_bytes());
        out.extend_from_slice(&self.dtype.to_le_bytes());
    }
}

/// Serialises the binary part of a pairset.
pub fn encode_pairset(pairset: &ActivationPairset) -> Result<Vec<u8>> {
    let d_model = u32::try_from(pairset.d_model())
        .map_err(|_| Error::DimensionMismatch("d_model exceeds u32".into()))?;
    let header = AtdHeader {
        version: ATD_VERSION,
        n_rows: pairset.n_rows() as u64,
        d_model,
        dtype: DTYPE_F32_LE,
    };
    let mut out = Vec::with_capacity(header.expected_len() as usize);
    header.encode(&mut out);
    encode_f32_rows(&pairset.x, "x", &mut out)?;
    encode_f32_rows(&pairset.y, "y", &mut out)?;
    Ok(out)
}

/// Parses the binary part of a pairset; `meta` is checked against the header.
pub fn decode_pairset(bytes: &[u8], meta: PairsetMeta) -> Result<ActivationPairset> {
    let header = AtdHeader::parse(bytes)?;
    let expected = header.expected_len();
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let rows = header.n_rows as usize;
    let cols = header.d_model as usize;
    if meta.n_rows != rows || meta.d_model != cols {
        return Err(Error::DimensionMismatch(format!(
            "sidecar says {}x{}, payload header says {}x{}",
            meta.n_rows, meta.d_model, rows, cols
        )));
    }
    let block = rows * cols * 4;
    let payload = &bytes[ATD_HEADER_LEN..];
    let x = decode_rows(&payload[..block], rows, cols, DTYPE_F32_LE, "x")?;
    let y = decode_rows(&payload[block..], rows, cols, DTYPE_F32_LE, "y")?;
    ActivationPairset::new(x, y, meta)
}

pub fn write_pairset(pairset: &ActivationPairset, path: &Path) -> Result<()> {
    let bytes = encode_pairset(pairset)?;
    let mut meta = serde_json::to_vec_pretty(&pairset.meta)?;
    meta.push(b'\n');
    atomic_write(path, &bytes)?;
    atomic_write(&sidecar_path(path), &meta)
}

pub fn read_sidecar(path: &Path) -> Result<PairsetMeta> {
    let side = sidecar_path(path);
    let text = read_file(&side)?;
    let meta: PairsetMeta = serde_json::from_slice(&text)?;
    Ok(meta)
}

pub fn read_pairset(path: &Path) -> Result<ActivationPairset> {
    let bytes = read_file(path)?;
    // header problems take precedence over sidecar problems
    AtdHeader::parse(&bytes)?;
    let meta = read_sidecar(path)?;
    decode_pairset(&bytes, meta)
}

/// Train/validation/test fractions plus the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: [f64; 3], seed: u64) -> Result<Self> {
        let spec = Self { fractions, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// 60/20/20.
    pub fn standard(seed: u64) -> Self {
        Self {
            fractions: [0.6, 0.2, 0.2],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be strictly positive, got {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Row counts for `n` rows: validation and test are floored, train takes the rest.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
        let val = floor(self.fractions[1]);
        let test = floor(self.fractions[2]);
        let train = floor(self.fractions[0]);
        let train = train + (n - train - val - test);
        let sizes = [train, val, test];
        if sizes.contains(&0) {
            return Err(Error::SplitTooSmall(format!(
                "{n} rows give split sizes {sizes:?}; every split needs at least one row"
            )));
        }
        Ok(sizes)
    }

    /// Row indices of each split, each sorted ascending.
    pub fn partition(&self, n: usize) -> Result<[Vec<usize>; 3]> {
        let [train, val, _] = self.sizes(n)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut parts = [
            perm[..train].to_vec(),
            perm[train..train + val].to_vec(),
            perm[train + val..].to_vec(),
        ];
        for p in &mut parts {
            p.sort_unstable();
        }
        Ok(parts)
    }
}

/// Row-disjoint train/validation/test split of a pairset.
pub fn split_pairset(
    pairset: &ActivationPairset,
    spec: &SplitSpec,
) -> Result<(ActivationPairset, ActivationPairset, ActivationPairset)> {
    let [train, val, test] = spec.partition(pairset.n_rows())?;
    Ok((
        pairset.select_rows(&train),
        pairset.select_rows(&val),
        pairset.select_rows(&test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ActivationPairset {
        let x = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = Matrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        ActivationPairset::from_matrices(x, y, 3, 1, "synthetic", Some(1)).unwrap()
    }

    fn rows(n: usize, d: usize) -> ActivationPairset {
        let x = Matrix::from_fn(n, d, |r, c| (r * d + c) as f64);
        let y = Matrix::from_fn(n, d, |r, c| -((r * d + c) as f64));
        ActivationPairset::from_matrices(x, y, 0, 1, "synthetic", None).unwrap()
    }

    #[test]
    fn encodes_2x2_layout() {
        let bytes = encode_pairset(&tiny()).unwrap();
        assert_eq!(bytes.len(), 24 + 32);
        assert_eq!(&bytes[..4], b"ATD1");
        assert_eq!(read_u32(&bytes, 4), 1);
        assert_eq!(read_u64(&bytes, 8), 2);
        assert_eq!(read_u32(&bytes, 16), 2);
        assert_eq!(read_u32(&bytes, 20), 1);
        let floats: Vec<f32> = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn empty_rows_is_header_only() {
        let p = ActivationPairset::from_matrices(
            Matrix::zeros(0, 4),
            Matrix::zeros(0, 4),
            0,
            1,
            "synthetic",
            None,
        )
        .unwrap();
        let bytes = encode_pairset(&p).unwrap();
        assert_eq!(bytes.len(), ATD_HEADER_LEN);
        let back = decode_pairset(&bytes, p.meta().clone()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.atd");
        let p = tiny();
        write_pairset(&p, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(read_pairset(&path).unwrap(), p);
    }

    #[test]
    fn sidecar_keys() {
        let v = serde_json::to_value(tiny().meta()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["d_model", "j_policy", "leap", "n_rows", "provenance", "seed", "source_layer"]
        );
        assert_eq!(v["j_policy"], "same_token");
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_pairset(&tiny()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_pairset(&bytes, tiny().meta().clone()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn rejects_unknown_version_and_dtype() {
        let mut bytes = encode_pairset(&tiny()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_pairset(&bytes, tiny().meta().clone()),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        let mut bytes = encode_pairset(&tiny()).unwrap();
        bytes[20] = 7;
        assert!(matches!(
            decode_pairset(&bytes, tiny().meta().clone()),
            Err(Error::UnsupportedDtype(7))
        ));
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = encode_pairset(&tiny()).unwrap();
        let cut = &bytes[..24 + 13];
        match decode_pairset(cut, tiny().meta().clone()) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 56);
                assert_eq!(actual, 37);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn sidecar_dimension_mismatch() {
        let bytes = encode_pairset(&tiny()).unwrap();
        let mut meta = tiny().meta().clone();
        meta.d_model = 3;
        assert!(matches!(
            decode_pairset(&bytes, meta),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.atd");
        write_pairset(&tiny(), &path).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(read_pairset(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn refuses_to_write_non_finite() {
        let mut x = Matrix::zeros(2, 2);
        x[(1, 0)] = f64::NAN;
        assert!(ActivationPairset::from_matrices(x, Matrix::zeros(2, 2), 0, 1, "s", None).is_err());
        // representable in f64, overflows f32
        let mut x = Matrix::zeros(2, 2);
        x[(0, 1)] = 1e300;
        let p = ActivationPairset::from_matrices(x, Matrix::zeros(2, 2), 0, 1, "s", None).unwrap();
        assert!(matches!(encode_pairset(&p), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn split_sizes_60_20_20() {
        let (a, b, c) = split_pairset(&rows(10, 2), &SplitSpec::standard(7)).unwrap();
        assert_eq!((a.n_rows(), b.n_rows(), c.n_rows()), (6, 2, 2));
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let sizes = SplitSpec::standard(0).sizes(11).unwrap();
        assert_eq!(sizes, [7, 2, 2]);
    }

    #[test]
    fn split_too_small() {
        let err = split_pairset(&rows(3, 2), &SplitSpec::standard(7)).unwrap_err();
        assert!(matches!(err, Error::SplitTooSmall(_)));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(SplitSpec::new([0.5, 0.5, 0.0], 1).is_err());
        assert!(SplitSpec::new([0.6, 0.2, 0.3], 1).is_err());
        assert!(SplitSpec::new([0.6, 0.2, 0.2], 1).is_ok());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let p = rows(50, 3);
        let spec = SplitSpec::standard(42);
        let first = spec.partition(50).unwrap();
        assert_eq!(first, spec.partition(50).unwrap());
        let mut all: Vec<usize> = first.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        let (a, _, _) = split_pairset(&p, &spec).unwrap();
        assert_eq!(a.x().row(0), p.x().row(first[0][0]));
        assert_eq!(a.y().row(0), p.y().row(first[0][0]));
    }
}
