//! Linear ranking models trained with Pegasos.
//!
//! The online trainer takes balanced mini-batches from a growing positive
//! pool and a fixed negative pool. The step at iteration `t` uses the
//! learning rate `1 / (λ t)`:
//!
//! ```text
//! w ← (1 − ηλ) w + (η / B) Σ_{y⟨w,x⟩ < 1} y x
//! ```
//!
//! optionally followed by projection onto the ball of radius `1 / √λ`.
//! The batch trainer runs the same solver over a fixed labeled set.

use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::format::{self, Reader, Writer};
use crate::store::FeatureStore;

pub const MODEL_MAGIC: &[u8; 4] = b"OTFM";

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_C: f64 = 0.25;

/// Weight vector of a linear scorer `⟨w, x⟩`, without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: Vec<f32>,
    /// Index `t` of the next Pegasos step; a fresh model starts at 1.
    iteration: u64,
    /// Publication counter; 0 until the model is published.
    version: u64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            iteration: 1,
            version: 0,
        }
    }

    pub fn from_weights(weights: Vec<f32>) -> Self {
        LinearModel {
            weights,
            iteration: 1,
            version: 0,
        }
    }

    /// Marks a model as published under `version` (e.g. a frozen model loaded from disk).
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn steps_applied(&self) -> u64 {
        self.iteration - 1
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dot(&self, x: &[f32]) -> f64 {
        dot(&self.weights, x)
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|&w| w as f64 * w as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// Order-sensitive checksum of the weight bits.
    pub fn checksum(&self) -> u64 {
        self.weights.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, w| {
            (h ^ w.to_bits() as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MODEL_MAGIC, 12 + self.weights.len() * 4);
        w.u32(format::to_u32(self.dim(), "dim")?)
            .u64(self.iteration)
            .f32s(&self.weights);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MODEL_MAGIC, "model file")?;
        let dim = r.u32()? as usize;
        let iteration = r.u64()?;
        let weights = r.f32s(dim)?;
        r.finish()?;
        Ok(LinearModel {
            weights,
            iteration,
            version: 0,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(w: &[f32], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Indexable training examples of a fixed dimension.
pub trait Samples {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn sample(&self, i: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for FeatureStore {
    fn dim(&self) -> usize {
        FeatureStore::dim(self)
    }

    fn len(&self) -> usize {
        FeatureStore::len(self)
    }

    fn sample(&self, i: usize) -> &[f32] {
        self.row(i)
    }
}

/// Plain row-major examples; may be empty.
#[derive(Debug, Clone, Default)]
pub struct Rows {
    dim: usize,
    data: Vec<f32>,
}

impl Rows {
    pub fn new(dim: usize) -> Self {
        Rows {
            dim,
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        check_dim(self.dim, v.len())?;
        self.data.extend_from_slice(v);
        Ok(())
    }
}

impl Samples for Rows {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Append-only pool of positive vectors, shared between one feeder and
/// any number of readers.
#[derive(Debug)]
pub struct PositivePool {
    dim: usize,
    rows: RwLock<Vec<Arc<[f32]>>>,
}

impl PositivePool {
    pub fn new(dim: usize) -> Self {
        PositivePool {
            dim,
            rows: RwLock::new(Vec::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&self, v: Vec<f32>) -> Result<usize> {
        check_dim(self.dim, v.len())?;
        let mut rows = self.rows.write().unwrap();
        rows.push(v.into());
        Ok(rows.len())
    }

    pub fn len(&self) -> usize {
        self.rows.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A consistent prefix of the pool.
    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            dim: self.dim,
            rows: self.rows.read().unwrap().clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolSnapshot {
    dim: usize,
    rows: Vec<Arc<[f32]>>,
}

impl Samples for PoolSnapshot {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn sample(&self, i: usize) -> &[f32] {
        &self.rows[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// L2 regularization constant.
    pub lambda: f64,
    /// Total batch size; half positives, half negatives.
    pub batch_size: usize,
    pub seed: u64,
    /// Project onto the ball of radius `1/√λ` after every step.
    pub project: bool,
    /// Publish the running average of iterates instead of the last iterate.
    pub average: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: DEFAULT_LAMBDA,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            project: true,
            average: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// What one step sampled, for instrumentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    /// The iteration index used for the learning rate.
    pub t: u64,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub violators: usize,
}

/// Applies one balanced mini-batch Pegasos step.
pub fn pegasos_step<P, N, R>(
    model: &mut LinearModel,
    pos: &P,
    neg: &N,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<StepReport>
where
    P: Samples + ?Sized,
    N: Samples + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if pos.is_empty() {
        return Err(Error::NotReady("positive pool is empty".into()));
    }
    if neg.is_empty() {
        return Err(Error::NotReady("negative pool is empty".into()));
    }
    let dim = model.dim();
    check_dim(dim, pos.dim())?;
    check_dim(dim, neg.dim())?;

    let half = cfg.batch_size / 2;
    let positives: Vec<usize> = (0..half).map(|_| rng.random_range(0..pos.len())).collect();
    let negatives: Vec<usize> = (0..half).map(|_| rng.random_range(0..neg.len())).collect();

    let t = model.iteration;
    let eta = 1.0 / (cfg.lambda * t as f64);
    let mut grad = vec![0f64; dim];
    let mut violators = 0;
    let batch = positives
        .iter()
        .map(|&i| (pos.sample(i), 1.0))
        .chain(negatives.iter().map(|&i| (neg.sample(i), -1.0)));
    for (x, y) in batch {
        if y * model.dot(x) < 1.0 {
            violators += 1;
            for (g, &v) in grad.iter_mut().zip(x) {
                *g += y * v as f64;
            }
        }
    }

    let shrink = 1.0 - eta * cfg.lambda;
    let step = eta / cfg.batch_size as f64;
    let mut next: Vec<f64> = model
        .weights
        .iter()
        .zip(&grad)
        .map(|(&w, &g)| shrink * w as f64 + step * g)
        .collect();
    if cfg.project {
        project_to_ball(&mut next, cfg.lambda);
    }
    for (w, v) in model.weights.iter_mut().zip(next) {
        *w = v as f32;
    }
    if cfg.project {
        clamp_rounded_norm(&mut model.weights, cfg.lambda);
    }
    model.iteration = t + 1;

    Ok(StepReport {
        t,
        positives,
        negatives,
        violators,
    })
}

fn project_to_ball(w: &mut [f64], lambda: f64) {
    let radius = 1.0 / lambda.sqrt();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        w.iter_mut().for_each(|x| *x *= s);
    }
}

/// Rounding the projected weights to f32 can leave the norm a few ulps past
/// the radius; shrink until the stored weights are inside the ball.
fn clamp_rounded_norm(w: &mut [f32], lambda: f64) {
    let radius = 1.0 / lambda.sqrt();
    loop {
        let norm = w.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm <= radius {
            return;
        }
        let s = radius / norm * (1.0 - f32::EPSILON as f64);
        w.iter_mut().for_each(|x| *x = (*x as f64 * s) as f32);
    }
}

/// Single-writer online trainer that publishes immutable model snapshots.
#[derive(Debug)]
pub struct OnlineTrainer {
    cfg: TrainerConfig,
    model: LinearModel,
    rng: ChaCha8Rng,
    average: Vec<f64>,
    published: Option<Arc<LinearModel>>,
}

impl OnlineTrainer {
    pub fn new(dim: usize, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OnlineTrainer {
            cfg,
            model: LinearModel::zeros(dim),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            average: vec![0.0; dim],
            published: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn steps_applied(&self) -> u64 {
        self.model.steps_applied()
    }

    pub fn step<P, N>(&mut self, pos: &P, neg: &N) -> Result<StepReport>
    where
        P: Samples + ?Sized,
        N: Samples + ?Sized,
    {
        let report = pegasos_step(&mut self.model, pos, neg, &self.cfg, &mut self.rng)?;
        if self.cfg.average {
            let k = self.model.steps_applied() as f64;
            for (a, &w) in self.average.iter_mut().zip(&self.model.weights) {
                *a += (w as f64 - *a) / k;
            }
        }
        Ok(report)
    }

    /// Publishes the current state. Re-publishing an unchanged state returns
    /// the previous snapshot with the same version.
    pub fn snapshot(&mut self) -> Result<Arc<LinearModel>> {
        if self.model.steps_applied() == 0 {
            return Err(Error::NotReady("no training step applied yet".into()));
        }
        if let Some(p) = &self.published {
            if p.iteration == self.model.iteration {
                return Ok(p.clone());
            }
        }
        let version = self.published.as_ref().map_or(1, |p| p.version + 1);
        let weights = if self.cfg.average {
            self.average.iter().map(|&a| a as f32).collect()
        } else {
            self.model.weights.clone()
        };
        let snap = Arc::new(LinearModel {
            weights,
            iteration: self.model.iteration,
            version,
        });
        self.published = Some(snap.clone());
        Ok(snap)
    }
}

/// Settings for [`train_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    /// SVM cost; mapped to `λ = 1 / (C n)`.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Learn an intercept as the weight of a constant unit feature
    /// (regularized like the others). It is dropped from the returned model
    /// because ranking ignores constant offsets, but without it zero-mean
    /// negatives can never reach the margin and dominate the solution.
    pub intercept: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            c: DEFAULT_C,
            epochs: 20,
            seed: 0,
            intercept: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchFit {
    pub model: LinearModel,
    /// Zero when the intercept is disabled.
    pub intercept: f64,
    pub lambda: f64,
    /// Objective of the returned (averaged) model.
    pub objective: f64,
    /// Lowest objective seen at any epoch boundary or at the end.
    pub best_objective: f64,
    /// Objective of the last iterate at the end of every epoch.
    pub epoch_objectives: Vec<f64>,
}

/// `λ/2 (‖w‖² + b²) + (1/n) Σ max(0, 1 − y(⟨w, x⟩ + b))` over both classes.
pub fn svm_objective<P, N>(w: &[f32], b: f64, pos: &P, neg: &N, lambda: f64) -> f64
where
    P: Samples + ?Sized,
    N: Samples + ?Sized,
{
    let n = (pos.len() + neg.len()) as f64;
    let reg = 0.5 * lambda * (w.iter().map(|&x| x as f64 * x as f64).sum::<f64>() + b * b);
    let hinge_pos: f64 = (0..pos.len())
        .map(|i| (1.0 - dot(w, pos.sample(i)) - b).max(0.0))
        .sum();
    let hinge_neg: f64 = (0..neg.len())
        .map(|i| (1.0 + dot(w, neg.sample(i)) + b).max(0.0))
        .sum();
    reg + (hinge_pos + hinge_neg) / n
}

/// Counts training pairs with `y(⟨w, x⟩ + b) < 1`.
pub fn hinge_violations<P, N>(w: &[f32], b: f64, pos: &P, neg: &N) -> usize
where
    P: Samples + ?Sized,
    N: Samples + ?Sized,
{
    let p = (0..pos.len())
        .filter(|&i| dot(w, pos.sample(i)) + b < 1.0)
        .count();
    let n = (0..neg.len())
        .filter(|&i| -(dot(w, neg.sample(i)) + b) < 1.0)
        .count();
    p + n
}

/// Fits an L2-regularized hinge-loss SVM with single-sample Pegasos over the
/// union of both classes, returning the average of the last quarter of iterates.
pub fn train_batch<P, N>(pos: &P, neg: &N, cfg: &BatchConfig) -> Result<BatchFit>
where
    P: Samples + ?Sized,
    N: Samples + ?Sized,
{
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateTraining(format!(
            "need both classes, have {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    check_dim(pos.dim(), neg.dim())?;
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(Error::Config(format!("C must be > 0, got {}", cfg.c)));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let dim = pos.dim();
    let n = pos.len() + neg.len();
    let lambda = 1.0 / (cfg.c * n as f64);
    let total = cfg.epochs * n;
    let suffix_start = total - total / 4;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // the intercept, if any, is stored as the last coordinate
    let aug = dim + usize::from(cfg.intercept);
    let mut w = vec![0f64; aug];
    let mut avg = vec![0f64; aug];
    let mut averaged = 0usize;
    let mut epoch_objectives = Vec::with_capacity(cfg.epochs);
    let split = |w: &[f64]| -> (Vec<f32>, f64) {
        let weights = w[..dim].iter().map(|&v| v as f32).collect();
        (weights, if cfg.intercept { w[dim] } else { 0.0 })
    };

    for step in 0..total {
        let t = (step + 1) as f64;
        let i = rng.random_range(0..n);
        let (x, y) = if i < pos.len() {
            (pos.sample(i), 1.0)
        } else {
            (neg.sample(i - pos.len()), -1.0)
        };
        let b = if cfg.intercept { w[dim] } else { 0.0 };
        let margin = y * (w.iter().zip(x).map(|(&a, &v)| a * v as f64).sum::<f64>() + b);
        let eta = 1.0 / (lambda * t);
        let shrink = 1.0 - eta * lambda;
        w.iter_mut().for_each(|v| *v *= shrink);
        if margin < 1.0 {
            for (v, &xv) in w.iter_mut().zip(x) {
                *v += eta * y * xv as f64;
            }
            if cfg.intercept {
                w[dim] += eta * y;
            }
        }
        project_to_ball(&mut w, lambda);

        if step >= suffix_start {
            averaged += 1;
            let k = averaged as f64;
            for (a, &v) in avg.iter_mut().zip(&w) {
                *a += (v - *a) / k;
            }
        }
        if (step + 1) % n == 0 {
            let (wf, b) = split(&w);
            epoch_objectives.push(svm_objective(&wf, b, pos, neg, lambda));
        }
    }

    let (weights, intercept) = split(&avg);
    let objective = svm_objective(&weights, intercept, pos, neg, lambda);
    let best_objective = epoch_objectives
        .iter()
        .copied()
        .fold(objective, f64::min);
    if objective > best_objective * 1.01 {
        tracing::warn!(
            objective,
            best_objective,
            "averaged iterate is more than 1% above the best observed objective"
        );
    }
    Ok(BatchFit {
        model: LinearModel {
            weights,
            iteration: total as u64 + 1,
            version: 0,
        },
        intercept,
        lambda,
        objective,
        best_objective,
        epoch_objectives,
    })
}
