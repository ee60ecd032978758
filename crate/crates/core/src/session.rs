//! Query sessions: feeder, online trainer and rank loop working together.
//!
//! [`SimSession`] is a single-threaded discrete-event engine driven by a
//! simulated clock; it is what makes convergence traces reproducible.
//! [`RunningSession`] runs a session on background threads, either on the
//! wall clock (one thread each for feeder, trainer and rank loop) or by
//! driving a [`SimSession`] forward in step with elapsed real time.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{RankLoop, RankedList, RankerConfig, Repository};
use crate::source::{emission_time, Feed, DEFAULT_RATE};
use crate::store::FeatureStore;
use crate::sync::{Slot, StopSignal};
use crate::trainer::{LinearModel, OnlineTrainer, PositivePool, Rows, Samples, TrainerConfig};

pub const DEFAULT_STEPS_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    /// No positive has arrived yet.
    Warming,
    Training,
    Stopped,
    Failed,
}

impl SessionState {
    pub fn as_str(&self) -> &'static str {
        match self {
            SessionState::Warming => "warming",
            SessionState::Training => "training",
            SessionState::Stopped => "stopped",
            SessionState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ClockMode {
    Wall,
    /// Simulated time advancing at `speed` simulated seconds per real second.
    Simulated { speed: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub trainer: TrainerConfig,
    pub ranker: RankerConfig,
    /// Positives per second released by the feeder.
    pub rate: f64,
    /// Trainer step cadence once the first positive has arrived.
    pub steps_per_second: f64,
    pub clock: ClockMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            trainer: TrainerConfig::default(),
            ranker: RankerConfig::default(),
            rate: DEFAULT_RATE,
            steps_per_second: DEFAULT_STEPS_PER_SECOND,
            clock: ClockMode::Wall,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.ranker.validate()?;
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("feed rate must be >= 0, got {}", self.rate)));
        }
        if !(self.steps_per_second > 0.0 && self.steps_per_second.is_finite()) {
            return Err(Error::Config(format!(
                "steps per second must be > 0, got {}",
                self.steps_per_second
            )));
        }
        if let ClockMode::Simulated { speed } = self.clock {
            if !(speed > 0.0 && speed.is_finite()) {
                return Err(Error::Config(format!("clock speed must be > 0, got {speed}")));
            }
        }
        Ok(())
    }
}

/// What a session ranks against. Negatives are in the repository's model
/// space (already embedded).
#[derive(Clone)]
pub struct SessionContext {
    pub repo: Arc<Repository>,
    pub negatives: Arc<FeatureStore>,
    pub exclude: Option<Arc<HashSet<u64>>>,
}

impl SessionContext {
    pub fn new(repo: Arc<Repository>, negatives: Arc<FeatureStore>) -> Result<Self> {
        if negatives.dim() != repo.model_dim() {
            return Err(Error::DimensionMismatch {
                expected: repo.model_dim(),
                actual: negatives.dim(),
            });
        }
        Ok(SessionContext {
            repo,
            negatives,
            exclude: None,
        })
    }

    pub fn with_exclude(mut self, exclude: HashSet<u64>) -> Self {
        self.exclude = Some(Arc::new(exclude));
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub positives_fed: u64,
    pub steps_applied: u64,
    pub lists_published: u64,
}

/// A published list together with the feed count at publication time.
#[derive(Debug, Clone, PartialEq)]
pub struct Published {
    pub list: Arc<RankedList>,
    pub positives_fed: u64,
    /// Wall-clock publication time, seconds since the Unix epoch.
    pub published_at: f64,
}

/// Passed to the tick callback of [`SimSession::advance_to`].
#[derive(Debug, Clone, Copy)]
pub struct Tick<'a> {
    pub time: f64,
    pub stats: SessionStats,
    /// Latest list, if any has been published.
    pub list: Option<&'a Arc<RankedList>>,
    /// Whether `list` was published at this tick.
    pub fresh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Feed,
    Step,
    Tick,
}

/// Deterministic session engine on a simulated clock.
///
/// Vector `j` arrives at `j / rate`. The first trainer step happens at the
/// arrival of the first positive and steps follow every
/// `1 / steps_per_second`. Rank ticks fall at `k * tau`. Events scheduled
/// for the same instant run in the order feed, step, tick.
pub struct SimSession {
    ctx: SessionContext,
    cfg: SessionConfig,
    feed: Box<dyn Feed>,
    feed_done: bool,
    pool: Rows,
    trainer: OnlineTrainer,
    now: f64,
    first_positive_at: Option<f64>,
    next_tick: u64,
    stats: SessionStats,
    latest: Option<Arc<RankedList>>,
}

impl SimSession {
    pub fn new(ctx: SessionContext, feed: Box<dyn Feed>, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = ctx.repo.model_dim();
        Ok(SimSession {
            trainer: OnlineTrainer::new(dim, cfg.trainer)?,
            pool: Rows::new(dim),
            ctx,
            cfg,
            feed,
            feed_done: cfg.rate == 0.0,
            now: 0.0,
            first_positive_at: None,
            next_tick: 1,
            stats: SessionStats::default(),
            latest: None,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    pub fn latest(&self) -> Option<&Arc<RankedList>> {
        self.latest.as_ref()
    }

    pub fn state(&self) -> SessionState {
        if self.stats.positives_fed == 0 {
            SessionState::Warming
        } else {
            SessionState::Training
        }
    }

    pub fn model(&self) -> &LinearModel {
        self.trainer.model()
    }

    /// Publishes the trainer's current state as an immutable snapshot.
    pub fn snapshot(&mut self) -> Result<Arc<LinearModel>> {
        self.trainer.snapshot()
    }

    fn next_event(&self) -> (f64, Event) {
        let mut best = (self.next_tick as f64 * self.cfg.ranker.tau, Event::Tick);
        let mut consider = |t: f64, e: Event| {
            if (t, e) < best {
                best = (t, e);
            }
        };
        if !self.feed_done {
            consider(emission_time(self.stats.positives_fed + 1, self.cfg.rate), Event::Feed);
        }
        if let Some(t0) = self.first_positive_at {
            let s = self.stats.steps_applied as f64;
            consider(t0 + s / self.cfg.steps_per_second, Event::Step);
        }
        best
    }

    /// Processes every event scheduled at or before `until` (seconds).
    pub fn advance_to(&mut self, until: f64, on_tick: &mut dyn FnMut(Tick<'_>)) -> Result<()> {
        loop {
            let (t, event) = self.next_event();
            if t > until {
                break;
            }
            self.now = t;
            match event {
                Event::Feed => self.feed_one(t)?,
                Event::Step => {
                    self.trainer.step(&self.pool, self.ctx.negatives.as_ref())?;
                    self.stats.steps_applied += 1;
                }
                Event::Tick => {
                    self.next_tick += 1;
                    let fresh = self.tick(t)?;
                    on_tick(Tick {
                        time: t,
                        stats: self.stats,
                        list: self.latest.as_ref(),
                        fresh,
                    });
                }
            }
        }
        self.now = self.now.max(until);
        Ok(())
    }

    fn feed_one(&mut self, t: f64) -> Result<()> {
        match self.feed.next_vector() {
            None => self.feed_done = true,
            Some(v) => {
                let x = self.ctx.repo.embed(&v)?;
                self.pool.push(&x)?;
                self.stats.positives_fed += 1;
                self.first_positive_at.get_or_insert(t);
            }
        }
        Ok(())
    }

    fn tick(&mut self, t: f64) -> Result<bool> {
        if self.stats.steps_applied == 0 {
            return Ok(false);
        }
        let model = self.trainer.snapshot()?;
        if self.latest.as_ref().is_some_and(|l| l.model_version == model.version()) {
            return Ok(false);
        }
        let list = self.ctx.repo.rank(
            &model,
            self.cfg.ranker.k,
            self.ctx.exclude.as_deref(),
            t,
        )?;
        self.latest = Some(Arc::new(list));
        self.stats.lists_published += 1;
        Ok(true)
    }
}

#[derive(Debug)]
struct Status {
    state: SessionState,
    reason: Option<String>,
}

/// State shared between a running session's threads and its readers.
#[derive(Debug)]
struct Shared {
    status: Mutex<Status>,
    published: Slot<Published>,
    fed: AtomicU64,
    steps: AtomicU64,
    lists: AtomicU64,
}

impl Shared {
    fn new() -> Self {
        Shared {
            status: Mutex::new(Status {
                state: SessionState::Warming,
                reason: None,
            }),
            published: Slot::new(),
            fed: AtomicU64::new(0),
            steps: AtomicU64::new(0),
            lists: AtomicU64::new(0),
        }
    }

    fn stats(&self) -> SessionStats {
        SessionStats {
            positives_fed: self.fed.load(Ordering::SeqCst),
            steps_applied: self.steps.load(Ordering::SeqCst),
            lists_published: self.lists.load(Ordering::SeqCst),
        }
    }

    fn begin_training(&self) {
        let mut s = self.status.lock().unwrap();
        if s.state == SessionState::Warming {
            s.state = SessionState::Training;
        }
    }

    fn fail(&self, reason: String) {
        tracing::error!("session failed: {reason}");
        let mut s = self.status.lock().unwrap();
        if s.state != SessionState::Stopped {
            s.state = SessionState::Failed;
            s.reason = Some(reason);
        }
    }

    fn publish(&self, list: &Arc<RankedList>) {
        self.published.store(Arc::new(Published {
            list: list.clone(),
            positives_fed: self.fed.load(Ordering::SeqCst),
            published_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
        }));
        self.lists.fetch_add(1, Ordering::SeqCst);
    }
}

/// A session running on background threads.
pub struct RunningSession {
    shared: Arc<Shared>,
    stop: Arc<StopSignal>,
    threads: Vec<JoinHandle<()>>,
    rank_loop: Option<RankLoop>,
    class: String,
}

impl RunningSession {
    pub fn start(ctx: SessionContext, feed: Box<dyn Feed>, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let class = feed.class().to_owned();
        let mut session = RunningSession {
            shared: Arc::new(Shared::new()),
            stop: Arc::new(StopSignal::new()),
            threads: Vec::new(),
            rank_loop: None,
            class,
        };
        match cfg.clock {
            ClockMode::Wall => session.spawn_wall(ctx, feed, cfg)?,
            ClockMode::Simulated { speed } => session.spawn_simulated(ctx, feed, cfg, speed)?,
        }
        Ok(session)
    }

    fn spawn_wall(&mut self, ctx: SessionContext, mut feed: Box<dyn Feed>, cfg: SessionConfig) -> Result<()> {
        let start = Instant::now();
        let dim = ctx.repo.model_dim();
        let pool = Arc::new(PositivePool::new(dim));
        let models: Arc<Slot<LinearModel>> = Arc::new(Slot::new());

        {
            let (shared, stop, pool, repo) = (self.shared.clone(), self.stop.clone(), pool.clone(), ctx.repo.clone());
            let rate = cfg.rate;
            self.threads.push(thread::Builder::new().name("feeder".into()).spawn(move || {
                if rate == 0.0 {
                    return;
                }
                for j in 1.. {
                    let due = start + Duration::from_secs_f64(emission_time(j, rate));
                    if stop.wait_until(due) {
                        return;
                    }
                    let Some(v) = feed.next_vector() else { return };
                    match repo.embed(&v).and_then(|x| pool.push(x)) {
                        Ok(n) => {
                            shared.fed.store(n as u64, Ordering::SeqCst);
                            shared.begin_training();
                        }
                        Err(e) => {
                            shared.fail(format!("positive {j}: {e}"));
                            stop.stop();
                            return;
                        }
                    }
                }
            })?);
        }

        {
            let (shared, stop, models, negatives) =
                (self.shared.clone(), self.stop.clone(), models.clone(), ctx.negatives.clone());
            let mut trainer = OnlineTrainer::new(dim, cfg.trainer)?;
            let period = 1.0 / cfg.steps_per_second;
            self.threads.push(thread::Builder::new().name("trainer".into()).spawn(move || {
                let mut first: Option<Instant> = None;
                loop {
                    let snap = pool.snapshot();
                    if snap.is_empty() {
                        if stop.wait_for(Duration::from_millis(2)) {
                            return;
                        }
                        continue;
                    }
                    let t0 = *first.get_or_insert_with(Instant::now);
                    if stop.is_stopped() {
                        return;
                    }
                    let published = trainer
                        .step(&snap, negatives.as_ref())
                        .and_then(|_| trainer.snapshot());
                    match published {
                        Ok(model) => {
                            models.store(model);
                            shared.steps.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => {
                            shared.fail(format!("training step: {e}"));
                            stop.stop();
                            return;
                        }
                    }
                    let n = trainer.steps_applied() as f64;
                    if stop.wait_until(t0 + Duration::from_secs_f64(n * period)) {
                        return;
                    }
                }
            })?);
        }

        let shared = self.shared.clone();
        self.rank_loop = Some(RankLoop::spawn(
            models,
            ctx.repo,
            ctx.exclude,
            cfg.ranker,
            start,
            Arc::new(Slot::new()),
            Box::new(move |list| shared.publish(list)),
        )?);
        Ok(())
    }

    fn spawn_simulated(
        &mut self,
        ctx: SessionContext,
        feed: Box<dyn Feed>,
        cfg: SessionConfig,
        speed: f64,
    ) -> Result<()> {
        let mut sim = SimSession::new(ctx, feed, cfg)?;
        let (shared, stop) = (self.shared.clone(), self.stop.clone());
        let poll = Duration::from_secs_f64((cfg.ranker.tau / speed / 4.0).clamp(0.001, 0.05));
        self.threads.push(thread::Builder::new().name("sim-driver".into()).spawn(move || {
            let start = Instant::now();
            loop {
                let target = start.elapsed().as_secs_f64() * speed;
                let mut on_tick = |tick: Tick<'_>| {
                    if tick.fresh && !stop.is_stopped() {
                        shared.fed.store(tick.stats.positives_fed, Ordering::SeqCst);
                        shared.publish(tick.list.unwrap());
                    }
                };
                let res = sim.advance_to(target, &mut on_tick);
                let stats = sim.stats();
                shared.fed.store(stats.positives_fed, Ordering::SeqCst);
                shared.steps.store(stats.steps_applied, Ordering::SeqCst);
                if stats.positives_fed > 0 {
                    shared.begin_training();
                }
                if let Err(e) = res {
                    shared.fail(e.to_string());
                    return;
                }
                if stop.wait_for(poll) {
                    return;
                }
            }
        })?);
        Ok(())
    }

    /// The corpus class the query resolved to.
    pub fn class(&self) -> &str {
        &self.class
    }

    /// A cheap read-only handle that stays valid after the session stops.
    pub fn monitor(&self) -> SessionMonitor {
        SessionMonitor {
            shared: self.shared.clone(),
        }
    }

    pub fn state(&self) -> SessionState {
        self.monitor().state()
    }

    pub fn stats(&self) -> SessionStats {
        self.shared.stats()
    }

    pub fn latest(&self) -> Option<Arc<Published>> {
        self.shared.published.load()
    }

    /// Halts all threads. Idempotent; the last published list stays readable.
    pub fn stop(&mut self) -> SessionStats {
        self.stop.stop();
        if let Some(mut rl) = self.rank_loop.take() {
            rl.stop();
        }
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
        let mut s = self.shared.status.lock().unwrap();
        if s.state != SessionState::Failed {
            s.state = SessionState::Stopped;
        }
        drop(s);
        self.shared.stats()
    }
}

/// Read-only view of a session's status, stats and latest list.
#[derive(Debug, Clone)]
pub struct SessionMonitor {
    shared: Arc<Shared>,
}

impl SessionMonitor {
    /// A session that failed before it could start.
    pub fn failed(reason: impl Into<String>) -> Self {
        let shared = Shared::new();
        {
            let mut s = shared.status.lock().unwrap();
            s.state = SessionState::Failed;
            s.reason = Some(reason.into());
        }
        SessionMonitor {
            shared: Arc::new(shared),
        }
    }

    pub fn state(&self) -> SessionState {
        self.shared.status.lock().unwrap().state
    }

    pub fn failure(&self) -> Option<String> {
        self.shared.status.lock().unwrap().reason.clone()
    }

    pub fn stats(&self) -> SessionStats {
        self.shared.stats()
    }

    pub fn latest(&self) -> Option<Arc<Published>> {
        self.shared.published.load()
    }

    pub fn is_active(&self) -> bool {
        matches!(self.state(), SessionState::Warming | SessionState::Training)
    }
}

impl Drop for RunningSession {
    fn drop(&mut self) {
        self.stop();
    }
}
