//! In-process retrieval service: a registry of query sessions sharing one
//! repository and one negative pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{Repository, Representation};
use crate::session::{
    RunningSession, SessionConfig, SessionContext, SessionMonitor, SessionState, SessionStats,
};
use crate::source::PositiveSource;
use crate::store::FeatureStore;

pub const DEFAULT_MAX_SESSIONS: usize = 8;
pub const DEFAULT_TTL: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceConfig {
    /// Template for new sessions; requests may override rate and k.
    pub session: SessionConfig,
    /// Cap on sessions that are warming or training.
    pub max_sessions: usize,
    /// How long finished sessions stay readable.
    pub ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session: SessionConfig::default(),
            max_sessions: DEFAULT_MAX_SESSIONS,
            ttl: DEFAULT_TTL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl SessionRequest {
    pub fn new(query: impl Into<String>) -> Self {
        SessionRequest {
            query: query.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub query: String,
    /// Corpus class the query resolved to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub state: SessionState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    pub updated_at: f64,
    pub rate: f64,
    pub k: usize,
    pub model_version: Option<u64>,
    #[serde(flatten)]
    pub stats: SessionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub id: u64,
    pub score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsView {
    pub state: SessionState,
    /// `None` until the first list is published.
    pub model_version: Option<u64>,
    pub positives_fed: u64,
    pub entries: Vec<ResultEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub repository_count: usize,
    pub dim: usize,
    pub representation: Representation,
}

struct Entry {
    id: String,
    query: String,
    class: Option<String>,
    created_at: f64,
    rate: f64,
    k: usize,
    monitor: SessionMonitor,
    runner: Mutex<Option<RunningSession>>,
    /// When the session was first seen finished; drives eviction.
    finished: Mutex<Option<Instant>>,
    updated_at: Mutex<f64>,
}

impl Entry {
    fn info(&self) -> SessionInfo {
        let latest = self.monitor.latest();
        let updated_at = {
            let mut u = self.updated_at.lock().unwrap();
            if let Some(p) = &latest {
                *u = u.max(p.published_at);
            }
            *u
        };
        SessionInfo {
            id: self.id.clone(),
            query: self.query.clone(),
            class: self.class.clone(),
            state: self.monitor.state(),
            reason: self.monitor.failure(),
            created_at: self.created_at,
            updated_at,
            rate: self.rate,
            k: self.k,
            model_version: latest.map(|p| p.list.model_version),
            stats: self.monitor.stats(),
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Owns the shared repository and negative pool and runs sessions.
pub struct RetrievalService {
    ctx: SessionContext,
    source: Arc<dyn PositiveSource>,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Entry>>>,
    /// Id to row lookup for compressed repositories, built when names exist.
    rows: Option<HashMap<u64, usize>>,
}

impl RetrievalService {
    /// `negatives` are raw features; they are embedded into the repository's
    /// model space once here and shared by every session.
    pub fn new(
        repo: Repository,
        negatives: &FeatureStore,
        source: Arc<dyn PositiveSource>,
        cfg: ServiceConfig,
    ) -> Result<Self> {
        cfg.session.validate()?;
        if cfg.max_sessions == 0 {
            return Err(Error::Config("max sessions must be >= 1".into()));
        }
        if source.dim() != repo.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: repo.feature_dim(),
                actual: source.dim(),
            });
        }
        let negatives = Arc::new(repo.embed_store(negatives)?);
        let rows = (!matches!(repo, Repository::Dense(_)) && repo.name(0).is_some())
            .then(|| repo.ids().iter().enumerate().map(|(r, &id)| (id, r)).collect());
        Ok(RetrievalService {
            ctx: SessionContext::new(Arc::new(repo), negatives)?,
            source,
            cfg,
            sessions: Mutex::new(HashMap::new()),
            rows,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn health(&self) -> Health {
        Health {
            repository_count: self.ctx.repo.len(),
            dim: self.ctx.repo.feature_dim(),
            representation: self.ctx.repo.representation(),
        }
    }

    /// Starts a session and returns immediately. A query that cannot be
    /// resolved yields a session in the failed state, not an error.
    pub fn create_session(&self, req: &SessionRequest) -> Result<SessionInfo> {
        let mut cfg = self.cfg.session;
        if let Some(rate) = req.rate {
            cfg.rate = rate;
        }
        if let Some(k) = req.k {
            cfg.ranker.k = k;
        }
        cfg.validate()?;

        let mut sessions = self.sessions.lock().unwrap();
        self.evict(&mut sessions);
        let active = sessions.values().filter(|e| e.monitor.is_active()).count();
        if active >= self.cfg.max_sessions {
            return Err(Error::Capacity(format!(
                "{active} sessions active, limit is {}",
                self.cfg.max_sessions
            )));
        }

        let id = uuid::Uuid::new_v4().simple().to_string();
        let (class, monitor, runner, finished) = match self.source.resolve(&req.query) {
            Ok(feed) => {
                let class = feed.class().to_owned();
                let runner = RunningSession::start(self.ctx.clone(), feed, cfg)?;
                (Some(class), runner.monitor(), Some(runner), None)
            }
            Err(e) => {
                tracing::info!(query = %req.query, "session failed to start: {e}");
                (None, SessionMonitor::failed(e.to_string()), None, Some(Instant::now()))
            }
        };
        let now = unix_now();
        let entry = Arc::new(Entry {
            id: id.clone(),
            query: req.query.clone(),
            class,
            created_at: now,
            rate: cfg.rate,
            k: cfg.ranker.k,
            monitor,
            runner: Mutex::new(runner),
            finished: Mutex::new(finished),
            updated_at: Mutex::new(now),
        });
        sessions.insert(id, entry.clone());
        drop(sessions);
        Ok(entry.info())
    }

    fn evict(&self, sessions: &mut HashMap<String, Arc<Entry>>) {
        let now = Instant::now();
        sessions.retain(|id, e| {
            if e.monitor.is_active() {
                return true;
            }
            let mut finished = e.finished.lock().unwrap();
            let since = *finished.get_or_insert(now);
            let keep = now.duration_since(since) < self.cfg.ttl;
            if !keep {
                tracing::debug!(session = %id, "evicting finished session");
            }
            keep
        });
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo> {
        Ok(self.entry(id)?.info())
    }

    /// The latest published list, truncated to `limit` entries.
    pub fn get_results(&self, id: &str, limit: Option<usize>) -> Result<ResultsView> {
        if limit == Some(0) {
            return Err(Error::Config("limit must be >= 1".into()));
        }
        let entry = self.entry(id)?;
        let state = entry.monitor.state();
        let Some(published) = entry.monitor.latest() else {
            return Ok(ResultsView {
                state,
                model_version: None,
                positives_fed: entry.monitor.stats().positives_fed,
                entries: Vec::new(),
            });
        };
        let take = limit.unwrap_or(usize::MAX);
        let entries = published
            .list
            .entries
            .iter()
            .take(take)
            .map(|e| ResultEntry {
                id: e.id,
                score: e.score,
                name: self.name_of(e.id),
            })
            .collect();
        Ok(ResultsView {
            state,
            model_version: Some(published.list.model_version),
            positives_fed: published.positives_fed,
            entries,
        })
    }

    fn name_of(&self, id: u64) -> Option<String> {
        let row = match &self.rows {
            Some(rows) => rows.get(&id).copied(),
            None => match &*self.ctx.repo {
                Repository::Dense(s) => s.row_of(id),
                _ => None,
            },
        }?;
        self.ctx.repo.name(row).map(str::to_owned)
    }

    /// Halts a session. Stopping twice is a no-op.
    pub fn stop_session(&self, id: &str) -> Result<SessionInfo> {
        let entry = self.entry(id)?;
        let runner = entry.runner.lock().unwrap().take();
        if let Some(mut runner) = runner {
            runner.stop();
            *entry.updated_at.lock().unwrap() = unix_now();
        }
        entry.finished.lock().unwrap().get_or_insert_with(Instant::now);
        Ok(entry.info())
    }

    pub fn list_sessions(&self) -> Vec<SessionInfo> {
        let mut all: Vec<SessionInfo> = self
            .sessions
            .lock()
            .unwrap()
            .values()
            .map(|e| e.info())
            .collect();
        all.sort_by(|a, b| a.created_at.total_cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        all
    }

    /// Stops every session.
    pub fn shutdown(&self) {
        let entries: Vec<Arc<Entry>> = self.sessions.lock().unwrap().values().cloned().collect();
        for e in entries {
            let _ = self.stop_session(&e.id);
        }
    }
}

impl Drop for RetrievalService {
    fn drop(&mut self) {
        self.shutdown();
    }
}
