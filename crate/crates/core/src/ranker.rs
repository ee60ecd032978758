//! Repository scoring and exact top-K selection.
//!
//! Scores are accumulated in `f64` over exact `f32` products and stored as
//! `f32`. Every row is scored independently, so parallel scoring is
//! bitwise reproducible. Ranked lists are ordered by descending score, ties
//! by ascending id.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{
    build_score_lut, BinaryCodec, BinaryCodes, BinaryScoreLut, PqCodebook, PqCodes,
};
use crate::error::{check_dim, Error, Result};
use crate::store::FeatureStore;
use crate::sync::{Slot, StopSignal};
use crate::trainer::{dot, LinearModel};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_TAU: f64 = 0.18;

const SHARD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: u64,
    pub score: f32,
}

/// Total order where "greater" means "ranked higher".
#[derive(Debug, Clone, Copy)]
struct Key {
    score: f32,
    id: u64,
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub model_version: u64,
    /// Seconds since the owning session started.
    pub produced_at: f64,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Order-sensitive checksum of ids and score bits.
    pub fn checksum(&self) -> u64 {
        self.entries.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, e| {
            let h = (h ^ e.id).wrapping_mul(0x0100_0000_01b3);
            (h ^ e.score.to_bits() as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub k: usize,
    /// Re-rank period in seconds.
    pub tau: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `⟨w, φ_i⟩` for every row, in store order.
pub fn score_dense(weights: &[f32], store: &FeatureStore) -> Result<Vec<f32>> {
    check_dim(store.dim(), weights.len())?;
    Ok(store
        .data()
        .par_chunks(store.dim())
        .map(|row| dot(weights, row) as f32)
        .collect())
}

/// Lookup-table scores of PQ codes.
pub fn score_pq(weights: &[f32], cb: &PqCodebook, codes: &PqCodes) -> Result<Vec<f32>> {
    codes.validate(cb)?;
    let lut = build_score_lut(weights, cb)?;
    Ok(codes
        .as_bytes()
        .par_chunks(codes.num_blocks())
        .map(|code| lut.score(code) as f32)
        .collect())
}

/// Sum of weights at set bits, for every code.
pub fn score_binary_codes(weights: &[f32], codes: &BinaryCodes) -> Result<Vec<f32>> {
    let lut = BinaryScoreLut::new(weights, codes.bits())?;
    Ok((0..codes.len())
        .into_par_iter()
        .map(|i| lut.score(codes.get_bytes(i)) as f32)
        .collect())
}

fn shard_top_k(
    scores: &[f32],
    offset: usize,
    ids: Option<&[u64]>,
    k: usize,
    keep: &(dyn Fn(usize) -> bool + Sync),
) -> Vec<Key> {
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::with_capacity(k + 1);
    for (i, &score) in scores.iter().enumerate() {
        let row = offset + i;
        if !keep(row) {
            continue;
        }
        let id = ids.map_or(row as u64, |ids| ids[row]);
        let key = Key { score, id };
        if heap.len() < k {
            heap.push(Reverse(key));
        } else if key > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Reverse(key));
        }
    }
    heap.into_iter().map(|r| r.0).collect()
}

/// The `k` best rows among those accepted by `keep`, reported with `ids[row]`.
pub fn top_k_filtered(
    scores: &[f32],
    ids: &[u64],
    k: usize,
    keep: &(dyn Fn(usize) -> bool + Sync),
) -> Vec<RankedEntry> {
    select(scores, Some(ids), k, keep)
}

/// The `k` largest scores with row indices as ids. Returns all rows when `k >= len`.
pub fn top_k(scores: &[f32], k: usize) -> Vec<RankedEntry> {
    select(scores, None, k, &|_| true)
}

fn select(
    scores: &[f32],
    ids: Option<&[u64]>,
    k: usize,
    keep: &(dyn Fn(usize) -> bool + Sync),
) -> Vec<RankedEntry> {
    if k == 0 || scores.is_empty() {
        return Vec::new();
    }
    let mut merged: Vec<Key> = if scores.len() <= SHARD {
        shard_top_k(scores, 0, ids, k, keep)
    } else {
        scores
            .par_chunks(SHARD)
            .enumerate()
            .flat_map_iter(|(s, chunk)| shard_top_k(chunk, s * SHARD, ids, k, keep))
            .collect()
    };
    merged.sort_unstable_by(|a, b| b.cmp(a));
    merged.truncate(k);
    merged
        .into_iter()
        .map(|key| RankedEntry {
            id: key.id,
            score: key.score,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Dense,
    Pq,
    Binary,
}

impl Representation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Representation::Dense => "dense",
            Representation::Pq => "pq",
            Representation::Binary => "binary",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Representation::Dense),
            "pq" => Ok(Representation::Pq),
            "binary" => Ok(Representation::Binary),
            other => Err(Error::Config(format!("unknown representation {other:?}"))),
        }
    }
}

/// A searchable repository in one of the three storage representations.
#[derive(Debug, Clone)]
pub enum Repository {
    Dense(FeatureStore),
    Pq {
        codebook: PqCodebook,
        codes: PqCodes,
        ids: Vec<u64>,
        names: Option<Vec<String>>,
    },
    Binary {
        codec: BinaryCodec,
        codes: BinaryCodes,
        ids: Vec<u64>,
        names: Option<Vec<String>>,
    },
}

impl Repository {
    pub fn dense(store: FeatureStore) -> Self {
        Repository::Dense(store)
    }

    /// Encodes `store` with `codebook`.
    pub fn pq(store: &FeatureStore, codebook: PqCodebook) -> Result<Self> {
        let codes = codebook.encode_store(store)?;
        Self::pq_from_codes(codebook, codes, store.ids().to_vec(), store.names().map(<[_]>::to_vec))
    }

    pub fn pq_from_codes(
        codebook: PqCodebook,
        codes: PqCodes,
        ids: Vec<u64>,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        codes.validate(&codebook)?;
        check_dim(codes.len(), ids.len())?;
        Ok(Repository::Pq {
            codebook,
            codes,
            ids,
            names,
        })
    }

    pub fn binary(store: &FeatureStore, codec: BinaryCodec) -> Result<Self> {
        let codes = codec.binarize_store(store)?;
        Self::binary_from_codes(codec, codes, store.ids().to_vec(), store.names().map(<[_]>::to_vec))
    }

    pub fn binary_from_codes(
        codec: BinaryCodec,
        codes: BinaryCodes,
        ids: Vec<u64>,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        check_dim(codec.bits(), codes.bits())?;
        check_dim(codes.len(), ids.len())?;
        Ok(Repository::Binary {
            codec,
            codes,
            ids,
            names,
        })
    }

    pub fn representation(&self) -> Representation {
        match self {
            Repository::Dense(_) => Representation::Dense,
            Repository::Pq { .. } => Representation::Pq,
            Repository::Binary { .. } => Representation::Binary,
        }
    }

    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> &[u64] {
        match self {
            Repository::Dense(s) => s.ids(),
            Repository::Pq { ids, .. } | Repository::Binary { ids, .. } => ids,
        }
    }

    pub fn name(&self, row: usize) -> Option<&str> {
        match self {
            Repository::Dense(s) => s.name(row),
            Repository::Pq { names, .. } | Repository::Binary { names, .. } => {
                names.as_ref().map(|n| n[row].as_str())
            }
        }
    }

    /// Dimension of the raw feature vectors fed in.
    pub fn feature_dim(&self) -> usize {
        match self {
            Repository::Dense(s) => s.dim(),
            Repository::Pq { codebook, .. } => codebook.dim(),
            Repository::Binary { codec, .. } => codec.frame().input_dim(),
        }
    }

    /// Dimension of the space the linear model lives in.
    pub fn model_dim(&self) -> usize {
        match self {
            Repository::Binary { codec, .. } => codec.bits(),
            _ => self.feature_dim(),
        }
    }

    /// Bytes of the stored representation, excluding ids and codebooks.
    pub fn payload_bytes(&self) -> u64 {
        match self {
            Repository::Dense(s) => s.payload_bytes(),
            Repository::Pq { codes, .. } => codes.payload_bytes(),
            Repository::Binary { codes, .. } => codes.payload_bytes(),
        }
    }

    /// Maps a raw feature into model space.
    pub fn embed(&self, v: &[f32]) -> Result<Vec<f32>> {
        match self {
            Repository::Binary { codec, .. } => Ok(codec.binarize(v)?.unpack()),
            _ => {
                check_dim(self.feature_dim(), v.len())?;
                Ok(v.to_vec())
            }
        }
    }

    /// Maps every row of `store` into model space, keeping ids.
    pub fn embed_store(&self, store: &FeatureStore) -> Result<FeatureStore> {
        match self {
            Repository::Binary { codec, .. } => {
                let codes = codec.binarize_store(store)?;
                let mut data = Vec::with_capacity(codes.len() * codec.bits());
                for i in 0..codes.len() {
                    data.extend(codes.get(i).unpack());
                }
                FeatureStore::new(codec.bits(), data, store.ids().to_vec())
            }
            _ => {
                check_dim(self.feature_dim(), store.dim())?;
                Ok(store.clone())
            }
        }
    }

    pub fn scores(&self, weights: &[f32]) -> Result<Vec<f32>> {
        match self {
            Repository::Dense(s) => score_dense(weights, s),
            Repository::Pq {
                codebook, codes, ..
            } => score_pq(weights, codebook, codes),
            Repository::Binary { codes, .. } => score_binary_codes(weights, codes),
        }
    }

    /// Scores everything and keeps the top `k`, skipping `exclude`d ids.
    pub fn rank(
        &self,
        model: &LinearModel,
        k: usize,
        exclude: Option<&HashSet<u64>>,
        produced_at: f64,
    ) -> Result<RankedList> {
        let scores = self.scores(model.weights())?;
        let ids = self.ids();
        let entries = match exclude {
            Some(ex) if !ex.is_empty() => {
                top_k_filtered(&scores, ids, k, &|row| !ex.contains(&ids[row]))
            }
            _ => top_k_filtered(&scores, ids, k, &|_| true),
        };
        Ok(RankedList {
            entries,
            model_version: model.version(),
            produced_at,
        })
    }

    /// Physically drops the given ids.
    pub fn without_ids(&self, excluded: &HashSet<u64>) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&r| !excluded.contains(&self.ids()[r]))
            .collect();
        let pick_names =
            |names: &Option<Vec<String>>| names.as_ref().map(|n| keep.iter().map(|&r| n[r].clone()).collect());
        let pick_ids = |ids: &[u64]| keep.iter().map(|&r| ids[r]).collect();
        match self {
            Repository::Dense(s) => Ok(Repository::Dense(s.select_rows(&keep)?)),
            Repository::Pq {
                codebook,
                codes,
                ids,
                names,
            } => Ok(Repository::Pq {
                codebook: codebook.clone(),
                codes: codes.select_rows(&keep),
                ids: pick_ids(ids),
                names: pick_names(names),
            }),
            Repository::Binary {
                codec,
                codes,
                ids,
                names,
            } => Ok(Repository::Binary {
                codec: codec.clone(),
                codes: codes.select_rows(&keep),
                ids: pick_ids(ids),
                names: pick_names(names),
            }),
        }
    }

    /// Row of `id`, by linear scan for compressed repositories.
    pub fn row_of(&self, id: u64) -> Option<usize> {
        match self {
            Repository::Dense(s) => s.row_of(id),
            _ => self.ids().iter().position(|&x| x == id),
        }
    }
}

/// Periodically re-ranks the repository with the latest published model.
///
/// Ticks fall on multiples of `tau` after `start`. A tick that is missed
/// because scoring overran is skipped, not queued. A list is published only
/// when the model version differs from the last published one.
pub struct RankLoop {
    stop: Arc<StopSignal>,
    handle: Option<JoinHandle<()>>,
}

impl RankLoop {
    pub fn spawn(
        models: Arc<Slot<LinearModel>>,
        repo: Arc<Repository>,
        exclude: Option<Arc<HashSet<u64>>>,
        cfg: RankerConfig,
        start: Instant,
        out: Arc<Slot<RankedList>>,
        on_publish: Box<dyn Fn(&Arc<RankedList>) + Send>,
    ) -> Result<Self> {
        cfg.validate()?;
        let stop = Arc::new(StopSignal::new());
        let signal = stop.clone();
        let tau = Duration::from_secs_f64(cfg.tau);
        let handle = thread::Builder::new()
            .name("rank-loop".into())
            .spawn(move || {
                let mut tick: u32 = 1;
                let mut last_version = None;
                loop {
                    if signal.wait_until(start + tau * tick) {
                        break;
                    }
                    if let Some(model) = models.load() {
                        if last_version != Some(model.version()) {
                            let at = start.elapsed().as_secs_f64();
                            match repo.rank(&model, cfg.k, exclude.as_deref(), at) {
                                Ok(list) => {
                                    // a stop issued while scoring must not publish
                                    if signal.is_stopped() {
                                        break;
                                    }
                                    last_version = Some(model.version());
                                    let list = Arc::new(list);
                                    out.store(list.clone());
                                    on_publish(&list);
                                }
                                Err(e) => tracing::error!("ranking failed: {e}"),
                            }
                        }
                    }
                    let elapsed = start.elapsed().as_secs_f64();
                    let next = (elapsed / cfg.tau).floor() as u32 + 1;
                    tick = next.max(tick + 1);
                }
            })?;
        Ok(RankLoop {
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(&mut self) {
        self.stop.stop();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RankLoop {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_sort_oracle(scores: &[f32], k: usize) -> Vec<(u64, f32)> {
        let mut all: Vec<(u64, f32)> = scores.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn k_at_least_n_returns_everything_sorted() {
        let scores = [0.5, 2.0, -1.0, 2.0];
        let got: Vec<u64> = top_k(&scores, 10).iter().map(|e| e.id).collect();
        assert_eq!(got, vec![1, 3, 0, 2]);
    }

    #[test]
    fn equal_scores_order_by_id() {
        let scores = [1.0f32; 50];
        let got: Vec<u64> = top_k(&scores, 5).iter().map(|e| e.id).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn matches_full_sort_with_ties_and_shards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [10_000usize, 200_000] {
            // coarse values force many ties
            let scores: Vec<f32> = (0..n).map(|_| (rng.random_range(0..5000) as f32) / 100.0).collect();
            let got: Vec<(u64, f32)> = top_k(&scores, 100).iter().map(|e| (e.id, e.score)).collect();
            assert_eq!(got, full_sort_oracle(&scores, 100));
        }
    }

    #[test]
    fn filtered_uses_external_ids() {
        let scores = [3.0, 2.0, 1.0];
        let ids = [30, 20, 10];
        let got = top_k_filtered(&scores, &ids, 2, &|row| row != 0);
        assert_eq!(got.iter().map(|e| e.id).collect::<Vec<_>>(), vec![20, 10]);
    }

    #[test]
    fn dense_scores_basis_and_zero() {
        let store = FeatureStore::from_rows(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(score_dense(&[0.0; 3], &store).unwrap(), vec![0.0, 0.0]);
        assert_eq!(score_dense(&[0.0, 1.0, 0.0], &store).unwrap(), vec![2.0, 5.0]);
        assert!(matches!(
            score_dense(&[0.0; 2], &store),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dense_scores_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 64;
        let store =
            FeatureStore::from_rows(dim, (0..1000 * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let w: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = score_dense(&w, &store).unwrap();
        for (i, s) in got.iter().enumerate() {
            let mut naive = 0f64;
            for j in 0..dim {
                naive += w[j] as f64 * store.row(i)[j] as f64;
            }
            assert!(((*s as f64) - naive).abs() <= 1e-5 * naive.abs().max(1e-3));
        }
    }

    #[test]
    fn rank_loop_republishes_nothing_while_idle() {
        let store = FeatureStore::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let repo = Arc::new(Repository::dense(store));
        let models = Arc::new(Slot::new());
        let out = Arc::new(Slot::new());
        let published = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let counter = published.clone();
        let cfg = RankerConfig { k: 2, tau: 0.01 };
        let mut rl = RankLoop::spawn(
            models.clone(),
            repo,
            None,
            cfg,
            Instant::now(),
            out.clone(),
            Box::new(move |_| {
                counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            }),
        )
        .unwrap();
        thread::sleep(Duration::from_millis(50));
        assert!(out.load().is_none());
        models.store(Arc::new(published_model(LinearModel::from_weights(vec![1.0, 0.0]), 1)));
        thread::sleep(Duration::from_millis(80));
        let first = out.load().unwrap();
        assert_eq!(first.model_version, 1);
        assert_eq!(first.ids(), vec![0, 2]);
        thread::sleep(Duration::from_millis(50));
        assert!(Arc::ptr_eq(&first, &out.load().unwrap()));
        assert_eq!(published.load(std::sync::atomic::Ordering::SeqCst), 1);
        rl.stop();
        models.store(Arc::new(published_model(LinearModel::from_weights(vec![0.0, 1.0]), 2)));
        thread::sleep(Duration::from_millis(40));
        assert_eq!(out.load().unwrap().model_version, 1);
    }

    fn published_model(m: LinearModel, version: u64) -> LinearModel {
        m.with_version(version)
    }
}
