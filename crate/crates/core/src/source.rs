//! Positive feeds: where a query's training positives come from.
//!
//! A [`PositiveSource`] resolves a text query to a [`Feed`] of raw feature
//! vectors. Pacing is not the feed's concern; sessions release vector `j`
//! (1-based) at `j / rate` seconds after the session starts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::store::{FeatureStore, LoadOptions, FEATURE_MAGIC};

pub const DEFAULT_RATE: f64 = 12.0;

/// A finite or unbounded stream of positives for one resolved query.
pub trait Feed: Send {
    /// The class the query resolved to.
    fn class(&self) -> &str;
    fn next_vector(&mut self) -> Option<Vec<f32>>;
}

pub trait PositiveSource: Send + Sync {
    fn dim(&self) -> usize;
    /// Features per second used when a session does not override it.
    fn default_rate(&self) -> f64;
    fn resolve(&self, query: &str) -> Result<Box<dyn Feed>>;
    fn classes(&self) -> Vec<String>;
}

/// Emission time of the `j`-th vector (1-based) at `rate` per second.
pub fn emission_time(j: u64, rate: f64) -> f64 {
    j as f64 / rate
}

/// Exact match first, then the first case-insensitive match in sorted order.
pub fn resolve_class<'a, I>(query: &str, names: I) -> Option<&'a str>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: Vec<&str> = names.into_iter().collect();
    if let Some(n) = names.iter().find(|&&n| n == query) {
        return Some(n);
    }
    let lower = query.to_lowercase();
    let mut folded: Vec<&str> = names
        .into_iter()
        .filter(|n| n.to_lowercase() == lower)
        .collect();
    folded.sort_unstable();
    folded.first().copied()
}

/// Streams the rows of a store in order.
pub struct StoreFeed {
    class: String,
    store: Arc<FeatureStore>,
    next: usize,
}

impl StoreFeed {
    pub fn new(class: impl Into<String>, store: Arc<FeatureStore>) -> Self {
        StoreFeed {
            class: class.into(),
            store,
            next: 0,
        }
    }
}

impl Feed for StoreFeed {
    fn class(&self) -> &str {
        &self.class
    }

    fn next_vector(&mut self) -> Option<Vec<f32>> {
        if self.next >= self.store.len() {
            return None;
        }
        let v = self.store.row(self.next).to_vec();
        self.next += 1;
        Some(v)
    }
}

/// In-memory per-class stores.
#[derive(Debug, Clone)]
pub struct MemorySource {
    dim: usize,
    rate: f64,
    classes: BTreeMap<String, Arc<FeatureStore>>,
}

impl MemorySource {
    pub fn new(rate: f64, classes: BTreeMap<String, Arc<FeatureStore>>) -> Result<Self> {
        let dim = classes
            .values()
            .next()
            .map(|s| s.dim())
            .ok_or_else(|| Error::Config("source has no classes".into()))?;
        if let Some((name, _)) = classes.iter().find(|(_, s)| s.dim() != dim) {
            return Err(Error::Config(format!("class {name:?} has a different dimension")));
        }
        Ok(MemorySource { dim, rate, classes })
    }
}

impl PositiveSource for MemorySource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn default_rate(&self) -> f64 {
        self.rate
    }

    fn resolve(&self, query: &str) -> Result<Box<dyn Feed>> {
        let class = resolve_class(query, self.classes.keys().map(String::as_str)).ok_or_else(|| {
            Error::Resolution {
                query: query.into(),
                reason: "no matching class in corpus".into(),
            }
        })?;
        Ok(Box::new(StoreFeed::new(class, self.classes[class].clone())))
    }

    fn classes(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }
}

/// Per-class feature files under a corpus root: either `<class>.otfr`
/// files or `<class>/` directories of `.otfr` files (read in name order).
/// Files are loaded on resolution.
#[derive(Debug, Clone)]
pub struct CorpusSource {
    dim: usize,
    rate: f64,
    opts: LoadOptions,
    classes: BTreeMap<String, Vec<PathBuf>>,
}

fn is_feature_file(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e == "otfr")
}

fn header_dim(path: &Path) -> Result<usize> {
    let mut head = [0u8; 12];
    fs::File::open(path)?.read_exact(&mut head).map_err(|_| {
        Error::Format(format!("{}: too short for a feature header", path.display()))
    })?;
    if &head[0..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{}: not an OTFR file", path.display())));
    }
    Ok(u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize)
}

/// Scans `root` for per-class feature files.
pub fn corpus_source(root: impl AsRef<Path>, rate: f64) -> Result<CorpusSource> {
    let root = root.as_ref();
    let mut classes: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if is_feature_file(&path) {
            classes.entry(stem.to_owned()).or_default().push(path.clone());
        } else if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| is_feature_file(p))
                .collect();
            files.sort();
            if !files.is_empty() {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                classes.entry(name).or_default().extend(files);
            }
        }
    }
    let first = classes
        .values()
        .flatten()
        .next()
        .ok_or_else(|| Error::Config(format!("no .otfr files under {}", root.display())))?;
    let dim = header_dim(first)?;
    for path in classes.values().flatten() {
        let d = header_dim(path)?;
        if d != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: d,
            });
        }
    }
    Ok(CorpusSource {
        dim,
        rate,
        opts: LoadOptions::default(),
        classes,
    })
}

impl CorpusSource {
    pub fn with_load_options(mut self, opts: LoadOptions) -> Self {
        self.opts = opts;
        self
    }

    /// All vectors of one class, in file order.
    pub fn load_class(&self, class: &str) -> Result<FeatureStore> {
        let files = self
            .classes
            .get(class)
            .ok_or_else(|| Error::NotFound(format!("class {class}")))?;
        let parts = files
            .iter()
            .map(|p| FeatureStore::load(p, &self.opts))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().unwrap());
        }
        let mut data = Vec::new();
        for p in &parts {
            data.extend_from_slice(p.data());
        }
        FeatureStore::from_rows(self.dim, data)
    }
}

impl PositiveSource for CorpusSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn default_rate(&self) -> f64 {
        self.rate
    }

    fn resolve(&self, query: &str) -> Result<Box<dyn Feed>> {
        let class = resolve_class(query, self.classes.keys().map(String::as_str)).ok_or_else(|| {
            Error::Resolution {
                query: query.into(),
                reason: "no matching class in corpus".into(),
            }
        })?;
        let store = self.load_class(class)?;
        Ok(Box::new(StoreFeed::new(class, Arc::new(store))))
    }

    fn classes(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }
}
