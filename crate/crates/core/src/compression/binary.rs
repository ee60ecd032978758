//! Tight-frame binarization: `bits = [U (v - center) > 0]`.
//!
//! `U` is `n × m` with orthonormal columns, taken from the Q factor of a QR
//! decomposition of a random Gaussian matrix. Frames are reproduced from
//! `(m, n, seed)` rather than stored densely. A codec's centering vector is
//! kept next to its frame file as a one-row `OTFR` file with the `.center`
//! extension.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::format::{self, Reader, Writer};
use crate::store::FeatureStore;

pub const FRAME_MAGIC: &[u8; 4] = b"OTFB";
pub const CODES_MAGIC: &[u8; 4] = b"OTFH";

/// An `n × m` projection with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TightFrame {
    m: usize,
    n: usize,
    seed: u64,
    /// Row-major `n × m`.
    matrix: Vec<f64>,
}

/// Generates the frame for `(m, n, seed)`.
///
/// The random `n × n` matrix is drawn column by column from a standard
/// normal. Only its first `m` columns influence the first `m` columns of the
/// Q factor, so only those are drawn and factored. Column signs are fixed so
/// that R has a non-negative diagonal.
pub fn make_tight_frame(m: usize, n: usize, seed: u64) -> Result<TightFrame> {
    if m == 0 || n < m {
        return Err(Error::Config(format!(
            "tight frame needs n >= m >= 1, got m={m}, n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        let z: f64 = StandardNormal.sample(&mut rng);
        cols.push(z);
    }
    let a = DMatrix::from_column_slice(n, m, &cols);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut matrix = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            matrix.push(q[(i, j)]);
        }
    }
    Ok(TightFrame { m, n, seed, matrix })
}

impl TightFrame {
    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.m + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.matrix[row * self.m..(row + 1) * self.m]
    }

    /// `U x` for an `m`-dimensional `x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.m, x.len())?;
        Ok(self
            .matrix
            .chunks_exact(self.m)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(FRAME_MAGIC, 16);
        w.u32(format::to_u32(self.m, "m")?)
            .u32(format::to_u32(self.n, "n")?)
            .u64(self.seed);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, FRAME_MAGIC, "frame file")?;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let seed = r.u64()?;
        r.finish()?;
        make_tight_frame(m, n, seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// A packed `n`-bit code. Bit `j` lives in byte `j / 8` at position `j % 8`;
/// padding bits are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    n: usize,
    bytes: Vec<u8>,
}

pub fn code_bytes(n: usize) -> usize {
    n.div_ceil(8)
}

fn padding_mask(n: usize) -> u8 {
    match n % 8 {
        0 => 0xFF,
        r => (1u8 << r) - 1,
    }
}

impl BinaryCode {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut bytes = vec![0u8; code_bytes(bits.len())];
        for (j, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            bytes[j / 8] |= 1 << (j % 8);
        }
        BinaryCode {
            n: bits.len(),
            bytes,
        }
    }

    /// Wraps packed bytes, rejecting non-zero padding.
    pub fn from_bytes(n: usize, bytes: Vec<u8>) -> Result<Self> {
        check_dim(code_bytes(n), bytes.len())?;
        if let Some(&last) = bytes.last() {
            if last & !padding_mask(n) != 0 {
                return Err(Error::Corrupt("non-zero padding bits".into()));
            }
        }
        Ok(BinaryCode { n, bytes })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, j: usize) -> bool {
        self.bytes[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.bytes.iter().map(|b| b.count_ones()).sum()
    }

    /// Flips every bit, keeping padding zero.
    pub fn complement(&self) -> Self {
        let mut bytes: Vec<u8> = self.bytes.iter().map(|b| !b).collect();
        if let Some(last) = bytes.last_mut() {
            *last &= padding_mask(self.n);
        }
        BinaryCode { n: self.n, bytes }
    }

    /// `{0, 1}` expansion used as features for the linear model.
    pub fn unpack(&self) -> Vec<f32> {
        (0..self.n).map(|j| if self.bit(j) { 1.0 } else { 0.0 }).collect()
    }
}

pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    check_dim(a.n, b.n)?;
    Ok(hamming_bytes(&a.bytes, &b.bytes))
}

fn hamming_bytes(a: &[u8], b: &[u8]) -> u32 {
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut total = 0;
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        total += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        total += (x ^ y).count_ones();
    }
    total
}

/// Sum of the weights at set bit positions.
pub fn score_binary(weights: &[f32], code: &BinaryCode) -> Result<f64> {
    check_dim(code.n, weights.len())?;
    let mut score = 0f64;
    for (i, &byte) in code.bytes.iter().enumerate() {
        let mut b = byte;
        while b != 0 {
            let j = b.trailing_zeros() as usize;
            score += weights[i * 8 + j] as f64;
            b &= b - 1;
        }
    }
    Ok(score)
}

/// A frame plus the centering vector subtracted before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCodec {
    frame: TightFrame,
    center: Vec<f32>,
}

impl BinaryCodec {
    pub fn new(frame: TightFrame, center: Vec<f32>) -> Result<Self> {
        check_dim(frame.input_dim(), center.len())?;
        Ok(BinaryCodec { frame, center })
    }

    pub fn frame(&self) -> &TightFrame {
        &self.frame
    }

    pub fn center(&self) -> &[f32] {
        &self.center
    }

    pub fn bits(&self) -> usize {
        self.frame.output_dim()
    }

    pub fn center_path(frame_path: &Path) -> PathBuf {
        frame_path.with_extension("center")
    }

    /// Loads a frame file and its `.center` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let frame = TightFrame::load(path)?;
        let center = FeatureStore::from_bytes(&fs::read(Self::center_path(path))?)?;
        if center.len() != 1 {
            return Err(Error::Format(format!(
                "centering file must hold one row, found {}",
                center.len()
            )));
        }
        Self::new(frame, center.row(0).to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.frame.write(path)?;
        FeatureStore::from_rows(self.center.len(), self.center.clone())?
            .write(Self::center_path(path))
    }

    pub fn binarize(&self, v: &[f32]) -> Result<BinaryCode> {
        check_dim(self.frame.input_dim(), v.len())?;
        let centered: Vec<f64> = v
            .iter()
            .zip(&self.center)
            .map(|(&x, &c)| x as f64 - c as f64)
            .collect();
        let y = self.frame.project(&centered)?;
        let bits: Vec<bool> = y.iter().map(|&a| a > 0.0).collect();
        Ok(BinaryCode::from_bits(&bits))
    }

    pub fn binarize_store(&self, store: &FeatureStore) -> Result<BinaryCodes> {
        check_dim(self.frame.input_dim(), store.dim())?;
        let n = self.bits();
        let stride = code_bytes(n);
        let mut data = vec![0u8; store.len() * stride];
        data.par_chunks_mut(stride)
            .zip(store.data().par_chunks(store.dim()))
            .try_for_each(|(out, row)| -> Result<()> {
                out.copy_from_slice(self.binarize(row)?.bytes());
                Ok(())
            })?;
        Ok(BinaryCodes { n, data })
    }
}

/// Packed codes for a whole repository.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodes {
    n: usize,
    data: Vec<u8>,
}

impl BinaryCodes {
    pub fn bits(&self) -> usize {
        self.n
    }

    pub fn stride(&self) -> usize {
        code_bytes(self.n)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get_bytes(&self, i: usize) -> &[u8] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn get(&self, i: usize) -> BinaryCode {
        BinaryCode {
            n: self.n,
            bytes: self.get_bytes(i).to_vec(),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.stride());
        for &r in rows {
            data.extend_from_slice(self.get_bytes(r));
        }
        BinaryCodes { n: self.n, data }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CODES_MAGIC, 12 + self.data.len());
        w.u64(self.len() as u64)
            .u32(format::to_u32(self.n, "n")?)
            .bytes(&self.data);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CODES_MAGIC, "binary code file")?;
        let count = r.u64()? as usize;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format("n is 0".into()));
        }
        let stride = code_bytes(n);
        let len = count
            .checked_mul(stride)
            .ok_or_else(|| Error::Corrupt("count * stride overflows".into()))?;
        let data = r.bytes(len)?.to_vec();
        r.finish()?;
        let mask = padding_mask(n);
        if data.chunks_exact(stride).any(|c| c[stride - 1] & !mask != 0) {
            return Err(Error::Corrupt("non-zero padding bits".into()));
        }
        Ok(BinaryCodes { n, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Byte-wise lookup table: entry `[i][b]` is the sum of the weights of the
/// bits set in byte value `b` at byte position `i`.
#[derive(Debug, Clone)]
pub struct BinaryScoreLut {
    table: Vec<f64>,
}

impl BinaryScoreLut {
    pub fn new(weights: &[f32], n: usize) -> Result<Self> {
        check_dim(n, weights.len())?;
        let stride = code_bytes(n);
        let mut table = vec![0f64; stride * 256];
        for i in 0..stride {
            let row = &mut table[i * 256..(i + 1) * 256];
            for b in 1..256usize {
                // extend the entry without its lowest set bit
                let low = b.trailing_zeros() as usize;
                let j = i * 8 + low;
                let w = if j < n { weights[j] as f64 } else { 0.0 };
                row[b] = row[b & (b - 1)] + w;
            }
        }
        Ok(BinaryScoreLut { table })
    }

    #[inline]
    pub fn score(&self, bytes: &[u8]) -> f64 {
        bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| self.table[i * 256 + b as usize])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn max_gram_deviation(u: &TightFrame) -> f64 {
        let (m, n) = (u.input_dim(), u.output_dim());
        let mut worst = 0f64;
        for a in 0..m {
            for b in 0..m {
                let dot: f64 = (0..n).map(|i| u.get(i, a) * u.get(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn square_frame_is_orthogonal() {
        let u = make_tight_frame(16, 16, 3).unwrap();
        assert!(max_gram_deviation(&u) < 1e-6);
        for a in 0..16 {
            for b in 0..16 {
                let dot: f64 = (0..16).map(|j| u.get(a, j) * u.get(b, j)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_is_deterministic_with_sign_convention() {
        let a = make_tight_frame(4, 12, 9).unwrap();
        let b = make_tight_frame(4, 12, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_tight_frame(4, 12, 10).unwrap());

        // R = Uᵀ A must be upper triangular with a non-negative diagonal.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cols: Vec<f64> = (0..12 * 4)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for j in 0..4 {
            for i in 0..4 {
                let r: f64 = (0..12).map(|k| a.get(k, i) * cols[j * 12 + k]).sum();
                if i == j {
                    assert!(r > 0.0);
                } else if i > j {
                    assert!(r.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn frame_rejects_bad_shape() {
        assert!(matches!(make_tight_frame(8, 4, 0), Err(Error::Config(_))));
        assert!(matches!(make_tight_frame(0, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn binarize_center_is_all_zero() {
        let frame = make_tight_frame(4, 8, 1).unwrap();
        let center = vec![0.1, -0.2, 0.3, 0.4];
        let codec = BinaryCodec::new(frame, center.clone()).unwrap();
        let code = codec.binarize(&center).unwrap();
        assert_eq!(code.count_ones(), 0);
        assert_eq!(code.len(), 8);
    }

    #[test]
    fn binarize_scale_invariant() {
        let frame = make_tight_frame(4, 8, 1).unwrap();
        let center = vec![0.1, -0.2, 0.3, 0.4];
        let codec = BinaryCodec::new(frame, center.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let v: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f32> = v
                .iter()
                .zip(&center)
                .map(|(&x, &c)| 2.0 * (x - c) + c)
                .collect();
            assert_eq!(codec.binarize(&v).unwrap(), codec.binarize(&scaled).unwrap());
        }
    }

    #[test]
    fn binarize_matches_direct_product() {
        let frame = make_tight_frame(4, 8, 5).unwrap();
        let codec = BinaryCodec::new(frame.clone(), vec![0.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let v: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let code = codec.binarize(&v).unwrap();
            for j in 0..8 {
                let y: f64 = (0..4).map(|i| frame.get(j, i) * v[i] as f64).sum();
                assert_eq!(code.bit(j), y > 0.0);
            }
        }
    }

    #[test]
    fn binarize_dimension_mismatch() {
        let codec = BinaryCodec::new(make_tight_frame(4, 8, 5).unwrap(), vec![0.0; 4]).unwrap();
        assert!(matches!(
            codec.binarize(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn packing_and_padding() {
        let code = BinaryCode::from_bits(&[true, false, true, true, false, false, false, false, true, true]);
        assert_eq!(code.bytes(), &[0b0000_1101, 0b0000_0011]);
        let not = code.complement();
        assert_eq!(not.bytes(), &[0b1111_0010, 0b0000_0000]);
        assert_eq!(hamming(&code, &not).unwrap(), 10);
        assert_eq!(hamming(&code, &code).unwrap(), 0);
        assert!(BinaryCode::from_bytes(10, vec![0, 0b100]).is_err());
    }

    #[test]
    fn hamming_length_mismatch() {
        let a = BinaryCode::from_bits(&[true; 9]);
        let b = BinaryCode::from_bits(&[true; 10]);
        assert!(hamming(&a, &b).is_err());
    }

    #[test]
    fn hamming_matches_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [1usize, 7, 64, 100, 1024] {
            let a: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let naive = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
            let got = hamming(&BinaryCode::from_bits(&a), &BinaryCode::from_bits(&b)).unwrap();
            assert_eq!(got, naive);
        }
    }

    #[test]
    fn score_binary_cases() {
        let w = [0.5f32, -1.0, 2.0, 0.25, 3.0];
        let zero = BinaryCode::from_bits(&[false; 5]);
        let ones = BinaryCode::from_bits(&[true; 5]);
        assert_eq!(score_binary(&w, &zero).unwrap(), 0.0);
        assert_eq!(score_binary(&w, &ones).unwrap(), 4.75);
        assert!(score_binary(&w[..4], &ones).is_err());
    }

    #[test]
    fn score_binary_matches_dense_dot_and_lut() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [13usize, 256, 1000] {
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lut = BinaryScoreLut::new(&w, n).unwrap();
            for _ in 0..20 {
                let bits: Vec<bool> = (0..n).map(|_| rng.random()).collect();
                let code = BinaryCode::from_bits(&bits);
                let dense: f64 = code
                    .unpack()
                    .iter()
                    .zip(&w)
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                assert!((score_binary(&w, &code).unwrap() - dense).abs() < 1e-6);
                assert!((lut.score(code.bytes()) - dense).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn files_roundtrip() {
        let frame = make_tight_frame(4, 10, 77).unwrap();
        assert_eq!(TightFrame::from_bytes(&frame.to_bytes().unwrap()).unwrap(), frame);
        let store = FeatureStore::from_rows(4, (0..12).map(|i| i as f32 - 5.0).collect()).unwrap();
        let codec = BinaryCodec::new(frame, store.mean()).unwrap();
        let codes = codec.binarize_store(&store).unwrap();
        assert_eq!(codes.len(), 3);
        assert_eq!(codes.stride(), 2);
        let bytes = codes.to_bytes().unwrap();
        assert_eq!(BinaryCodes::from_bytes(&bytes).unwrap(), codes);
        for i in 0..3 {
            assert_eq!(codes.get(i), codec.binarize(store.row(i)).unwrap());
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.otfb");
        codec.write(&path).unwrap();
        assert!(dir.path().join("frame.center").exists());
        assert_eq!(BinaryCodec::load(&path).unwrap(), codec);
    }
}
