//! On-the-fly category retrieval.
//!
//! A linear SVM is trained online with Pegasos from a stream of positive
//! feature vectors against a fixed negative pool, while a ranking loop
//! periodically re-scores a large repository of precomputed features with
//! the latest model. The repository may be stored dense, product-quantized,
//! or as tight-frame binary codes.

pub mod compression;
pub mod error;
pub mod eval;
mod format;
pub mod ranker;
pub mod service;
pub mod session;
pub mod source;
pub mod store;
pub mod sync;
pub mod trainer;

pub use error::{Error, Result};
pub use ranker::{RankedEntry, RankedList, RankerConfig, Repository, Representation};
pub use service::{RetrievalService, ServiceConfig, SessionRequest};
pub use session::{ClockMode, RunningSession, SessionConfig, SessionContext, SessionState, SimSession};
pub use source::{corpus_source, Feed, MemorySource, PositiveSource};
pub use store::{FeatureStore, LabelSet, LoadOptions};
pub use trainer::{LinearModel, OnlineTrainer, TrainerConfig};
