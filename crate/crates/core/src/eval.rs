//! Evaluation protocol: precision@K, train/test scenarios with distractors,
//! and convergence traces over simulated time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{RankedEntry, RankerConfig, Repository};
use crate::session::{SessionConfig, SessionContext, SimSession, Tick};
use crate::source::{Feed, StoreFeed};
use crate::store::{FeatureStore, LabelSet};
use crate::trainer::{train_batch, BatchConfig, LinearModel};

/// `|top min(k, len) ∩ positives| / k`. The denominator stays `k` when the
/// list is shorter.
pub fn precision_at_k(entries: &[RankedEntry], positives: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("precision depth k must be >= 1".into()));
    }
    if entries.len() < k {
        tracing::warn!("ranked list has {} entries, fewer than k = {k}", entries.len());
    }
    let hits = entries
        .iter()
        .take(k)
        .filter(|e| positives.contains(&e.id))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Training and test material for a set of classes. Features are raw
/// (unembedded); the repository decides the model space.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Training positives per class.
    pub train: BTreeMap<String, FeatureStore>,
    pub negatives: FeatureStore,
    /// The uncompressed test store, with original ids.
    pub test: FeatureStore,
    pub test_labels: LabelSet,
}

/// Splits a generated corpus: the first `train_per_class` rows of every
/// class train, the rest are test positives. Unlabeled rows are
/// distractors; the first `negatives` of them form the negative pool and
/// the remainder join the test store.
pub fn split_scenario(
    store: &FeatureStore,
    labels: &LabelSet,
    train_per_class: usize,
    negatives: usize,
) -> Result<Scenario> {
    let labeled: HashSet<u64> = labels.classes().flat_map(|(_, ids)| ids.iter().copied()).collect();
    let mut train = BTreeMap::new();
    let mut test_rows = Vec::new();
    let mut test_labels = LabelSet::new();
    for (class, ids) in labels.classes() {
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| store.row_of(id).ok_or_else(|| Error::NotFound(format!("id {id}"))))
            .collect::<Result<_>>()?;
        if rows.len() <= train_per_class {
            return Err(Error::InsufficientData {
                needed: train_per_class + 1,
                available: rows.len(),
            });
        }
        let (tr, te) = rows.split_at(train_per_class);
        train.insert(class.to_owned(), store.select_rows(tr)?);
        for &r in te {
            test_labels.insert(class, store.id(r));
        }
        test_rows.extend_from_slice(te);
    }
    let distractors: Vec<usize> = (0..store.len())
        .filter(|&r| !labeled.contains(&store.id(r)))
        .collect();
    if distractors.len() < negatives {
        return Err(Error::InsufficientData {
            needed: negatives,
            available: distractors.len(),
        });
    }
    let (neg, rest) = distractors.split_at(negatives);
    test_rows.extend_from_slice(rest);
    test_rows.sort_unstable();
    Ok(Scenario {
        train,
        negatives: store.select_rows(neg)?,
        test: store.select_rows(&test_rows)?,
        test_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainerSpec {
    Batch(BatchConfig),
    /// Stream the training positives through a simulated session for
    /// `duration` seconds and rank with the final model.
    Online { session: SessionConfig, duration: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub k: usize,
    pub trainer: TrainerSpec,
    /// Ids removed from ranking; must exist in the test store.
    pub excluded: HashSet<u64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            k: crate::ranker::DEFAULT_K,
            trainer: TrainerSpec::Batch(BatchConfig::default()),
            excluded: HashSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    /// `None` when the class has no test positives.
    pub prec_at_k: Option<f64>,
    pub train_time_s: f64,
    pub rank_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub k: usize,
    pub representation: String,
    pub payload_bytes: u64,
    pub classes: Vec<ClassResult>,
    /// Mean over classes with a defined precision.
    pub mean_prec_at_k: Option<f64>,
}

impl ScenarioReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class\tprec_at_k\ttrain_time_s\trank_time_s\n");
        for c in &self.classes {
            let p = c.prec_at_k.map_or("NA".to_string(), |p| format!("{p:.4}"));
            let _ = writeln!(s, "{}\t{p}\t{:.4}\t{:.4}", c.class, c.train_time_s, c.rank_time_s);
        }
        let mean = self.mean_prec_at_k.map_or("NA".to_string(), |p| format!("{p:.4}"));
        let undefined = self.classes.iter().filter(|c| c.prec_at_k.is_none()).count();
        let _ = writeln!(
            s,
            "# mean_prec_at_k={mean} k={} classes={} undefined={undefined} representation={} payload_bytes={}",
            self.k,
            self.classes.len(),
            self.representation,
            self.payload_bytes
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains one model per class and ranks the repository with it.
pub fn train_class(
    scenario: &Scenario,
    class: &str,
    repo: &Arc<Repository>,
    negatives: &Arc<FeatureStore>,
    trainer: &TrainerSpec,
) -> Result<LinearModel> {
    let positives = scenario
        .train
        .get(class)
        .ok_or_else(|| Error::NotFound(format!("no training positives for class {class:?}")))?;
    match trainer {
        TrainerSpec::Batch(cfg) => {
            let pos = repo.embed_store(positives)?;
            Ok(train_batch(&pos, negatives.as_ref(), cfg)?.model)
        }
        TrainerSpec::Online { session, duration } => {
            let ctx = SessionContext::new(repo.clone(), negatives.clone())?;
            let feed = StoreFeed::new(class, Arc::new(positives.clone()));
            let mut sim = SimSession::new(ctx, Box::new(feed), *session)?;
            sim.advance_to(*duration, &mut |_| {})?;
            Ok(sim.snapshot()?.as_ref().clone())
        }
    }
}

/// Runs every class in `scenario.train` against `repo`, which must hold
/// the test store in some representation.
pub fn run_scenario(scenario: &Scenario, repo: &Arc<Repository>, cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    if cfg.k == 0 {
        return Err(Error::Config("precision depth k must be >= 1".into()));
    }
    if let Some(id) = cfg.excluded.iter().find(|&&id| repo.row_of(id).is_none()) {
        return Err(Error::NotFound(format!("excluded id {id} is not in the repository")));
    }
    let negatives = Arc::new(repo.embed_store(&scenario.negatives)?);
    let exclude = (!cfg.excluded.is_empty()).then_some(&cfg.excluded);
    let mut classes = Vec::new();
    for class in scenario.train.keys() {
        let t0 = Instant::now();
        let model = train_class(scenario, class, repo, &negatives, &cfg.trainer)?;
        let train_time_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let list = repo.rank(&model, cfg.k, exclude, 0.0)?;
        let rank_time_s = t1.elapsed().as_secs_f64();
        let positives = scenario
            .test_labels
            .class(class)
            .filter(|p| p.iter().any(|id| !cfg.excluded.contains(id)));
        let prec_at_k = match positives {
            Some(p) => Some(precision_at_k(&list.entries, p, cfg.k)?),
            None => {
                tracing::warn!("class {class} has no test positives; precision undefined");
                None
            }
        };
        classes.push(ClassResult {
            class: class.clone(),
            prec_at_k,
            train_time_s,
            rank_time_s,
        });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.prec_at_k).collect();
    let mean_prec_at_k = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ScenarioReport {
        k: cfg.k,
        representation: repo.representation().as_str().to_owned(),
        payload_bytes: repo.payload_bytes(),
        classes,
        mean_prec_at_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub positives_fed: u64,
    pub prec_at_k: f64,
    pub top_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub class: String,
    pub k: usize,
    pub points: Vec<TracePoint>,
}

impl ConvergenceTrace {
    pub fn final_precision(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.prec_at_k)
    }

    /// First time the trace reaches `fraction` of its final precision.
    pub fn time_to_fraction(&self, fraction: f64) -> Option<f64> {
        let target = fraction * self.final_precision();
        self.points
            .iter()
            .find(|p| p.prec_at_k >= target && p.prec_at_k > 0.0)
            .map(|p| p.t)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("t_seconds\tpositives_fed\tprec_at_k\n");
        for p in &self.points {
            let _ = writeln!(s, "{:.3}\t{}\t{:.4}", p.t, p.positives_fed, p.prec_at_k);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub session: SessionConfig,
    /// Simulated seconds to run.
    pub duration: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            session: SessionConfig {
                clock: crate::session::ClockMode::Simulated { speed: 1.0 },
                ranker: RankerConfig::default(),
                ..Default::default()
            },
            duration: 10.0,
        }
    }
}

/// Records precision@K of the live list at every rank tick over
/// `[0, duration]` on the simulated clock. The first point is `t = 0` and
/// the last is `t = duration`.
pub fn run_convergence(
    ctx: SessionContext,
    feed: Box<dyn Feed>,
    positives: &BTreeSet<u64>,
    cfg: &ConvergenceConfig,
) -> Result<ConvergenceTrace> {
    let k = cfg.session.ranker.k;
    let class = feed.class().to_owned();
    let mut sim = SimSession::new(ctx, feed, cfg.session)?;
    let mut points = vec![TracePoint {
        t: 0.0,
        positives_fed: 0,
        prec_at_k: 0.0,
        top_ids: Vec::new(),
    }];
    let mut err = None;
    sim.advance_to(cfg.duration, &mut |tick: Tick<'_>| {
        let (prec_at_k, top_ids) = match tick.list {
            Some(list) => match precision_at_k(&list.entries, positives, k) {
                Ok(p) => (p, list.ids()),
                Err(e) => {
                    err.get_or_insert(e);
                    return;
                }
            },
            None => (0.0, Vec::new()),
        };
        points.push(TracePoint {
            t: tick.time,
            positives_fed: tick.stats.positives_fed,
            prec_at_k,
            top_ids,
        });
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    if points.last().is_some_and(|p| p.t < cfg.duration) {
        let (prec_at_k, top_ids) = match sim.latest() {
            Some(list) => (precision_at_k(&list.entries, positives, k)?, list.ids()),
            None => (0.0, Vec::new()),
        };
        points.push(TracePoint {
            t: cfg.duration,
            positives_fed: sim.stats().positives_fed,
            prec_at_k,
            top_ids,
        });
    }
    Ok(ConvergenceTrace { class, k, points })
}
