//! Product quantization with one byte per sub-block.
//!
//! A `dim`-dimensional vector is split into `dim / subdim` contiguous
//! sub-blocks; each block is replaced by the index of its nearest centroid in
//! a per-block vocabulary of at most 256 entries.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kmeans::{self, KMeansOutcome};
use crate::error::{check_dim, Error, Result};
use crate::format::{self, Reader, Writer};
use crate::store::FeatureStore;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"OTFQ";
pub const CODES_MAGIC: &[u8; 4] = b"OTFC";

pub const DEFAULT_CENTROIDS: usize = 256;
pub const DEFAULT_ITERATIONS: usize = 25;

/// Per-block centroid tables plus the centering vector of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    subdim: usize,
    num_centroids: usize,
    /// Block-major: block `m`, centroid `j`, component `q`.
    centroids: Vec<f32>,
    center: Vec<f32>,
}

fn derive_seed(seed: u64, block: usize) -> u64 {
    // splitmix64 step over (seed, block)
    let mut z = seed ^ (block as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_shape(dim: usize, subdim: usize, num_centroids: usize) -> Result<()> {
    if dim == 0 || subdim == 0 || !dim.is_multiple_of(subdim) {
        return Err(Error::Config(format!(
            "dim {dim} is not a positive multiple of subdim {subdim}"
        )));
    }
    if num_centroids == 0 || num_centroids > 256 {
        return Err(Error::Config(format!(
            "num_centroids must be in 1..=256, got {num_centroids}"
        )));
    }
    Ok(())
}

/// Learns one k-means vocabulary per sub-block of `train`.
pub fn learn_pq_codebook(
    train: &FeatureStore,
    subdim: usize,
    num_centroids: usize,
    iterations: usize,
    seed: u64,
) -> Result<PqCodebook> {
    learn_pq_codebook_traced(train, subdim, num_centroids, iterations, seed, false).map(|r| r.0)
}

/// Learns a codebook and returns the per-block k-means outcomes alongside it.
pub fn learn_pq_codebook_traced(
    train: &FeatureStore,
    subdim: usize,
    num_centroids: usize,
    iterations: usize,
    seed: u64,
    keep_snapshots: bool,
) -> Result<(PqCodebook, Vec<KMeansOutcome>)> {
    let dim = train.dim();
    check_shape(dim, subdim, num_centroids)?;
    if train.len() < num_centroids {
        return Err(Error::InsufficientData {
            needed: num_centroids,
            available: train.len(),
        });
    }
    let blocks = dim / subdim;
    let outcomes = (0..blocks)
        .into_par_iter()
        .map(|m| {
            let mut sub = Vec::with_capacity(train.len() * subdim);
            for row in train.rows() {
                sub.extend_from_slice(&row[m * subdim..(m + 1) * subdim]);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, m));
            if keep_snapshots {
                kmeans::lloyd_traced(&sub, subdim, num_centroids, iterations, &mut rng)
            } else {
                kmeans::lloyd(&sub, subdim, num_centroids, iterations, &mut rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut centroids = Vec::with_capacity(blocks * num_centroids * subdim);
    for o in &outcomes {
        centroids.extend_from_slice(&o.centroids);
    }
    let cb = PqCodebook {
        dim,
        subdim,
        num_centroids,
        centroids,
        center: train.mean(),
    };
    Ok((cb, outcomes))
}

impl PqCodebook {
    /// Builds a codebook from explicit block-major centroid tables.
    pub fn from_parts(
        dim: usize,
        subdim: usize,
        num_centroids: usize,
        centroids: Vec<f32>,
        center: Vec<f32>,
    ) -> Result<Self> {
        check_shape(dim, subdim, num_centroids)?;
        let expected = dim / subdim * num_centroids * subdim;
        if centroids.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} centroid values, got {}",
                centroids.len()
            )));
        }
        check_dim(dim, center.len())?;
        Ok(PqCodebook {
            dim,
            subdim,
            num_centroids,
            centroids,
            center,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subdim(&self) -> usize {
        self.subdim
    }

    pub fn num_blocks(&self) -> usize {
        self.dim / self.subdim
    }

    pub fn num_centroids(&self) -> usize {
        self.num_centroids
    }

    pub fn center(&self) -> &[f32] {
        &self.center
    }

    /// Vocabulary of block `m` (`num_centroids * subdim` values).
    pub fn block(&self, m: usize) -> &[f32] {
        let len = self.num_centroids * self.subdim;
        &self.centroids[m * len..(m + 1) * len]
    }

    pub fn centroid(&self, m: usize, j: usize) -> &[f32] {
        &self.block(m)[j * self.subdim..(j + 1) * self.subdim]
    }

    /// Encodes into `out`, one byte per block.
    pub fn encode_into(&self, v: &[f32], out: &mut [u8]) -> Result<()> {
        check_dim(self.dim, v.len())?;
        check_dim(self.num_blocks(), out.len())?;
        for (m, code) in out.iter_mut().enumerate() {
            let slice = &v[m * self.subdim..(m + 1) * self.subdim];
            *code = kmeans::nearest(slice, self.block(m), self.subdim).0 as u8;
        }
        Ok(())
    }

    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.num_blocks()];
        self.encode_into(v, &mut out)?;
        Ok(out)
    }

    pub fn decode(&self, code: &[u8]) -> Result<Vec<f32>> {
        check_dim(self.num_blocks(), code.len())?;
        let mut out = Vec::with_capacity(self.dim);
        for (m, &c) in code.iter().enumerate() {
            if c as usize >= self.num_centroids {
                return Err(Error::Corrupt(format!(
                    "code {c} in block {m} exceeds {} centroids",
                    self.num_centroids
                )));
            }
            out.extend_from_slice(self.centroid(m, c as usize));
        }
        Ok(out)
    }

    /// Encodes every row of `store`, in parallel.
    pub fn encode_store(&self, store: &FeatureStore) -> Result<PqCodes> {
        check_dim(self.dim, store.dim())?;
        let blocks = self.num_blocks();
        let mut codes = vec![0u8; store.len() * blocks];
        codes
            .par_chunks_mut(blocks)
            .zip(store.data().par_chunks(self.dim))
            .try_for_each(|(out, row)| self.encode_into(row, out))?;
        Ok(PqCodes {
            num_blocks: blocks,
            codes,
        })
    }

    /// Reconstructs every code as a dense store with the given ids.
    pub fn decode_all(&self, codes: &PqCodes, ids: Vec<u64>) -> Result<FeatureStore> {
        let mut data = Vec::with_capacity(codes.len() * self.dim);
        for code in codes.iter() {
            data.extend(self.decode(code)?);
        }
        FeatureStore::new(self.dim, data, ids)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CODEBOOK_MAGIC, 12 + (self.centroids.len() + self.dim) * 4);
        w.u32(format::to_u32(self.dim, "dim")?)
            .u32(format::to_u32(self.subdim, "subdim")?)
            .u32(format::to_u32(self.num_centroids, "num_centroids")?)
            .f32s(&self.centroids)
            .f32s(&self.center);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CODEBOOK_MAGIC, "codebook file")?;
        let dim = r.u32()? as usize;
        let subdim = r.u32()? as usize;
        let k = r.u32()? as usize;
        check_shape(dim, subdim, k).map_err(|e| Error::Format(e.to_string()))?;
        let centroids = r.f32s(dim / subdim * k * subdim)?;
        let center = r.f32s(dim)?;
        r.finish()?;
        Self::from_parts(dim, subdim, k, centroids, center)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Codes for a whole repository, `num_blocks` bytes per vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PqCodes {
    num_blocks: usize,
    codes: Vec<u8>,
}

impl PqCodes {
    pub fn new(num_blocks: usize, codes: Vec<u8>) -> Result<Self> {
        if num_blocks == 0 || !codes.len().is_multiple_of(num_blocks) {
            return Err(Error::Corrupt(format!(
                "{} code bytes do not split into blocks of {num_blocks}",
                codes.len()
            )));
        }
        Ok(PqCodes { num_blocks, codes })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.num_blocks
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u8] {
        &self.codes[i * self.num_blocks..(i + 1) * self.num_blocks]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, u8> {
        self.codes.chunks_exact(self.num_blocks)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.codes
    }

    /// Storage of the code payload alone.
    pub fn payload_bytes(&self) -> u64 {
        self.codes.len() as u64
    }

    /// Checks every code against a codebook.
    pub fn validate(&self, cb: &PqCodebook) -> Result<()> {
        check_dim(cb.num_blocks(), self.num_blocks)?;
        if cb.num_centroids() < 256 {
            if let Some(pos) = self
                .codes
                .iter()
                .position(|&c| c as usize >= cb.num_centroids())
            {
                return Err(Error::Corrupt(format!(
                    "vector {} block {} has code {} >= {}",
                    pos / self.num_blocks,
                    pos % self.num_blocks,
                    self.codes[pos],
                    cb.num_centroids()
                )));
            }
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut codes = Vec::with_capacity(rows.len() * self.num_blocks);
        for &r in rows {
            codes.extend_from_slice(self.get(r));
        }
        PqCodes {
            num_blocks: self.num_blocks,
            codes,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CODES_MAGIC, 12 + self.codes.len());
        w.u64(self.len() as u64)
            .u32(format::to_u32(self.num_blocks, "num_blocks")?)
            .bytes(&self.codes);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CODES_MAGIC, "pq code file")?;
        let count = r.u64()? as usize;
        let blocks = r.u32()? as usize;
        if blocks == 0 {
            return Err(Error::Format("num_blocks is 0".into()));
        }
        let len = count
            .checked_mul(blocks)
            .ok_or_else(|| Error::Corrupt("count * num_blocks overflows".into()))?;
        let codes = r.bytes(len)?.to_vec();
        r.finish()?;
        Self::new(blocks, codes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Per-block inner products of a linear model with every centroid.
#[derive(Debug, Clone)]
pub struct ScoreLut {
    num_blocks: usize,
    num_centroids: usize,
    table: Vec<f64>,
}

/// Builds the `num_blocks × num_centroids` table of partial inner products.
pub fn build_score_lut(weights: &[f32], cb: &PqCodebook) -> Result<ScoreLut> {
    check_dim(cb.dim(), weights.len())?;
    let q = cb.subdim();
    let mut table = Vec::with_capacity(cb.num_blocks() * cb.num_centroids());
    for m in 0..cb.num_blocks() {
        let w = &weights[m * q..(m + 1) * q];
        for j in 0..cb.num_centroids() {
            let c = cb.centroid(m, j);
            table.push(w.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum());
        }
    }
    Ok(ScoreLut {
        num_blocks: cb.num_blocks(),
        num_centroids: cb.num_centroids(),
        table,
    })
}

impl ScoreLut {
    pub fn get(&self, block: usize, centroid: usize) -> f64 {
        self.table[block * self.num_centroids + centroid]
    }

    /// Sum of table entries selected by `code`. Codes must be validated.
    #[inline]
    pub fn score(&self, code: &[u8]) -> f64 {
        debug_assert_eq!(code.len(), self.num_blocks);
        code.iter()
            .enumerate()
            .map(|(m, &c)| self.table[m * self.num_centroids + c as usize])
            .sum()
    }
}
