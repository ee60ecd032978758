//! Immutable repositories of feature vectors and their ground-truth labels.
//!
//! Feature files use the `OTFR` layout:
//!
//! ```text
//! bytes 0..4    magic "OTFR"
//! bytes 4..8    u32 version (1)
//! bytes 8..12   u32 dim
//! bytes 12..20  u64 count
//! then          count * dim f32 values, row-major, little-endian
//! ```
//!
//! Two optional text sidecars live next to a feature file: `<stem>.ids`
//! holds the external name of row `k` on line `k`, and `<stem>.labels`
//! holds `<class>\t<id>` records.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::format::{self, Reader, Writer};

pub const FEATURE_MAGIC: &[u8; 4] = b"OTFR";
const HEADER_LEN: usize = 20;

/// Returns `v / ‖v‖₂`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
enum IdIndex {
    /// ids are exactly `0..count` in row order.
    Sequential,
    Map(HashMap<u64, usize>),
}

/// An immutable `count × dim` matrix of feature vectors with unique ids.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
    names: Option<Vec<String>>,
    index: IdIndex,
}

impl PartialEq for FeatureStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.names == other.names
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureStore {
    /// Builds a store with ids `0..count`.
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyStore("dim is 0".into()));
        }
        let count = data.len() / dim;
        Self::new(dim, data, (0..count as u64).collect())
    }

    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyStore("dim is 0".into()));
        }
        if ids.is_empty() {
            return Err(Error::EmptyStore("count is 0".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(Error::Corrupt(format!(
                "{} values do not form {} rows of dim {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        let index = if ids.iter().enumerate().all(|(i, &id)| id == i as u64) {
            IdIndex::Sequential
        } else {
            let mut map = HashMap::with_capacity(ids.len());
            for (row, &id) in ids.iter().enumerate() {
                if map.insert(id, row).is_some() {
                    return Err(Error::Config(format!("duplicate id {id}")));
                }
            }
            IdIndex::Map(map)
        };
        Ok(FeatureStore {
            dim,
            data,
            ids,
            names: None,
            index,
        })
    }

    /// Attaches external names, one per row.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.len() {
            return Err(Error::Config(format!(
                "{} names for {} rows",
                names.len(),
                self.len()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// L2-normalizes every row, rejecting zero vectors.
    pub fn normalized(mut self) -> Result<Self> {
        let dim = self.dim;
        for (row, chunk) in self.data.chunks_exact_mut(dim).enumerate() {
            let n = normalize(chunk).map_err(|_| {
                Error::DegenerateInput(format!("row {row} (id {}) is a zero vector", self.ids[row]))
            })?;
            chunk.copy_from_slice(&n);
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        match &self.index {
            IdIndex::Sequential => (id < self.ids.len() as u64).then_some(id as usize),
            IdIndex::Map(map) => map.get(&id).copied(),
        }
    }

    pub fn name(&self, row: usize) -> Option<&str> {
        self.names.as_ref().map(|n| n[row].as_str())
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Bytes needed for the raw `f32` payload.
    pub fn payload_bytes(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    /// Copies the given rows (in the given order) into a new store, keeping ids and names.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Config(format!("row {r} out of range")));
            }
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r]);
        }
        let store = Self::new(self.dim, data, ids)?;
        match &self.names {
            Some(names) => store.with_names(rows.iter().map(|&r| names[r].clone()).collect()),
            None => Ok(store),
        }
    }

    /// Copies the rows with the given ids.
    pub fn select_ids(&self, ids: &[u64]) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|&id| {
                self.row_of(id)
                    .ok_or_else(|| Error::NotFound(format!("id {id} not in store")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_rows(&rows)
    }

    /// Physically rebuilds the store without the excluded ids.
    pub fn without_ids(&self, excluded: &HashSet<u64>) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&r| !excluded.contains(&self.ids[r]))
            .collect();
        self.select_rows(&rows)
    }

    /// Component-wise mean of all rows.
    pub fn mean(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for row in self.rows() {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        let n = self.len() as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    /// Concatenates stores of equal dimension. Ids must stay unique.
    pub fn concat(parts: &[&FeatureStore]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyStore("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for p in parts {
            check_dim(first.dim, p.dim)?;
            data.extend_from_slice(&p.data);
            ids.extend_from_slice(&p.ids);
        }
        Self::new(first.dim, data, ids)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(FEATURE_MAGIC, HEADER_LEN + self.data.len() * 4);
        w.u32(format::to_u32(self.dim, "dim")?)
            .u64(self.len() as u64)
            .f32s(&self.data);
        Ok(w.into_bytes())
    }

    /// Parses an `OTFR` image. Rows get ids `0..count`; values are kept as stored.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, FEATURE_MAGIC, "feature file")?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 || count == 0 {
            return Err(Error::EmptyStore(format!(
                "header declares dim={dim}, count={count}"
            )));
        }
        let count = usize::try_from(count)
            .map_err(|_| Error::Corrupt(format!("count {count} too large")))?;
        let values = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Corrupt("count * dim overflows".into()))?;
        let data = r.f32s(values)?;
        r.finish()?;
        Self::from_rows(dim, data)
    }

    /// Loads an `OTFR` file plus its `.ids` sidecar when present.
    pub fn load(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path)?;
        let mut store = Self::from_bytes(&buf)?;
        let sidecar = ids_sidecar(path);
        if sidecar.exists() {
            store = store.with_names(read_names(&sidecar)?)?;
        }
        if opts.normalize {
            store = store.normalized()?;
        }
        Ok(store)
    }

    /// Writes the `OTFR` image (and the `.ids` sidecar when the store has names).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?)?;
        if let Some(names) = &self.names {
            let mut text = String::new();
            for n in names {
                text.push_str(n);
                text.push('\n');
            }
            fs::write(ids_sidecar(path), text)?;
        }
        Ok(())
    }
}

/// Ingestion options for [`FeatureStore::load`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { normalize: true }
    }
}

impl LoadOptions {
    /// Keeps values bit-for-bit as stored.
    pub fn raw() -> Self {
        LoadOptions { normalize: false }
    }
}

pub fn ids_sidecar(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn labels_sidecar(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Per-class sets of positive ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    classes: BTreeMap<String, BTreeSet<u64>>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: impl Into<String>, id: u64) {
        self.classes.entry(class.into()).or_default().insert(id);
    }

    pub fn class(&self, name: &str) -> Option<&BTreeSet<u64>> {
        self.classes.get(name)
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, &BTreeSet<u64>)> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Every id must be present in `store`.
    pub fn validate(&self, store: &FeatureStore) -> Result<()> {
        for (class, ids) in &self.classes {
            if let Some(id) = ids.iter().find(|&&id| store.row_of(id).is_none()) {
                return Err(Error::Config(format!(
                    "label {class:?} references id {id} missing from the store"
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = LabelSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (class, id) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("labels line {}: expected <class>\\t<id>", lineno + 1))
            })?;
            let id = id.trim().parse::<u64>().map_err(|e| {
                Error::Format(format!("labels line {}: bad id: {e}", lineno + 1))
            })?;
            set.insert(class, id);
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (class, ids) in &self.classes {
            for id in ids {
                out.push_str(class);
                out.push('\t');
                out.push_str(&id.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Parameters of the Gaussian-cluster corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub distractors: usize,
    /// Standard deviation of positives around their class centre.
    pub cluster_spread: f64,
    /// Standard deviation of class centres (and distractors) around the origin.
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 128,
            classes: 5,
            per_class: 100,
            distractors: 10_000,
            cluster_spread: 1.0,
            center_spread: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be finite and >= 0".into()));
        }
        if !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
            return Err(Error::Config("center_spread must be finite and > 0".into()));
        }
        if self.classes * self.per_class + self.distractors == 0 {
            return Err(Error::EmptyStore("configuration generates no vectors".into()));
        }
        Ok(())
    }
}

pub fn class_name(c: usize) -> String {
    format!("class{c:02}")
}

/// Draws a labeled corpus of unit-norm vectors.
///
/// Rows are laid out class by class (`per_class` rows each, ids ascending),
/// followed by the distractors. Class `c` is named `class{c:02}`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(FeatureStore, LabelSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;
    let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    };

    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..dim).map(|_| gauss(&mut rng, cfg.center_spread)).collect())
        .collect();

    let total = cfg.classes * cfg.per_class + cfg.distractors;
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = LabelSet::new();
    let mut row = vec![0f32; dim];
    let mut next_id = 0u64;

    for (c, center) in centers.iter().enumerate() {
        let name = class_name(c);
        for _ in 0..cfg.per_class {
            for (x, &m) in row.iter_mut().zip(center) {
                let noise = if cfg.cluster_spread > 0.0 {
                    gauss(&mut rng, cfg.cluster_spread)
                } else {
                    0.0
                };
                *x = (m + noise) as f32;
            }
            data.extend(normalize(&row)?);
            labels.insert(name.clone(), next_id);
            next_id += 1;
        }
    }
    for _ in 0..cfg.distractors {
        for x in row.iter_mut() {
            *x = gauss(&mut rng, cfg.center_spread) as f32;
        }
        data.extend(normalize(&row)?);
    }

    let store = FeatureStore::from_rows(dim, data)?;
    Ok((store, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_store() -> FeatureStore {
        FeatureStore::from_rows(3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = normalize(&[3.0, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-7);
        assert!((n[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let v = [0.0, 1.0, 0.0, 0.0];
        let n = normalize(&v).unwrap();
        for (a, b) in n.iter().zip(&v) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn normalize_idempotent_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v: Vec<f32> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
            let once = normalize(&v).unwrap();
            let twice = normalize(&once).unwrap();
            assert!((l2_norm(&once) - 1.0).abs() < 1e-6);
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn header_echo() {
        let store = FeatureStore::from_rows(128, vec![0.5; 256]).unwrap();
        let bytes = store.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20 + 256 * 4);
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.dim(), 128);
        assert_eq!(back.len(), 2);
        assert_eq!(back.ids(), &[0, 1]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = sample_store().to_bytes().unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeatureStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = sample_store().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(FeatureStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let bytes = sample_store().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(FeatureStore::from_bytes(cut), Err(Error::Corrupt(_))));
    }

    #[test]
    fn empty_header_is_empty_store() {
        let mut w = Writer::new(FEATURE_MAGIC, 0);
        w.u32(0).u64(5);
        assert!(matches!(
            FeatureStore::from_bytes(&w.into_bytes()),
            Err(Error::EmptyStore(_))
        ));
        let mut w = Writer::new(FEATURE_MAGIC, 0);
        w.u32(4).u64(0);
        assert!(matches!(
            FeatureStore::from_bytes(&w.into_bytes()),
            Err(Error::EmptyStore(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(FeatureStore::new(1, vec![1.0, 2.0], vec![3, 3]).is_err());
    }

    #[test]
    fn without_ids_keeps_original_ids() {
        let store = FeatureStore::from_rows(1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kept = store.without_ids(&HashSet::from([1, 2])).unwrap();
        assert_eq!(kept.ids(), &[0, 3]);
        assert_eq!(kept.row_of(3), Some(1));
        assert_eq!(kept.row(1), &[4.0]);
    }

    #[test]
    fn labels_parse_and_validate() {
        let labels = LabelSet::parse("sheep\t0\nsheep\t1\ncar\t1\n").unwrap();
        assert_eq!(labels.class("sheep").unwrap().len(), 2);
        assert_eq!(LabelSet::parse(&labels.to_text()).unwrap(), labels);
        labels.validate(&sample_store()).unwrap();
        let bad = LabelSet::parse("sheep\t9\n").unwrap();
        assert!(bad.validate(&sample_store()).is_err());
        assert!(LabelSet::parse("sheep 0\n").is_err());
    }

    #[test]
    fn synthetic_counts() {
        let cfg = SynthConfig {
            dim: 8,
            classes: 2,
            per_class: 10,
            distractors: 0,
            ..SynthConfig::default()
        };
        let (store, labels) = generate_synthetic(&cfg).unwrap();
        assert_eq!(store.len(), 20);
        assert_eq!(labels.len(), 2);
        for (_, ids) in labels.classes() {
            assert_eq!(ids.len(), 10);
        }
        labels.validate(&store).unwrap();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig {
            dim: 16,
            distractors: 50,
            ..SynthConfig::default()
        };
        let (a, la) = generate_synthetic(&cfg).unwrap();
        let (b, lb) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_synthetic(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_zero_spread_collapses_class() {
        let cfg = SynthConfig {
            dim: 8,
            classes: 3,
            per_class: 4,
            distractors: 2,
            cluster_spread: 0.0,
            ..SynthConfig::default()
        };
        let (store, labels) = generate_synthetic(&cfg).unwrap();
        for (_, ids) in labels.classes() {
            let rows: Vec<&[f32]> = ids.iter().map(|&id| store.row(id as usize)).collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
        }
        for row in store.rows() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_rejects_bad_spread() {
        let cfg = SynthConfig {
            center_spread: 0.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}
