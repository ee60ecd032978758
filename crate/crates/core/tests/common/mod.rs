#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use otf_core::eval::{split_scenario, Scenario};
use otf_core::source::{Feed, MemorySource, PositiveSource};
use otf_core::store::{generate_synthetic, SynthConfig};
use otf_core::Result;

/// Small three-class corpus: 40 training and 40 test positives per class,
/// 300 negatives and 2000 test distractors.
pub fn small_scenario() -> Scenario {
    let cfg = SynthConfig {
        dim: 32,
        classes: 3,
        per_class: 80,
        distractors: 2300,
        cluster_spread: 1.0,
        center_spread: 1.0,
        seed: 11,
    };
    let (store, labels) = generate_synthetic(&cfg).unwrap();
    split_scenario(&store, &labels, 40, 300).unwrap()
}

pub fn memory_source(s: &Scenario, rate: f64) -> MemorySource {
    let classes: BTreeMap<_, _> = s
        .train
        .iter()
        .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
        .collect();
    MemorySource::new(rate, classes).unwrap()
}

/// Wraps a source and counts every vector its feeds hand out.
pub struct CountingSource<S> {
    pub inner: S,
    pub emitted: Arc<AtomicU64>,
}

struct CountingFeed {
    inner: Box<dyn Feed>,
    emitted: Arc<AtomicU64>,
}

impl Feed for CountingFeed {
    fn class(&self) -> &str {
        self.inner.class()
    }

    fn next_vector(&mut self) -> Option<Vec<f32>> {
        let v = self.inner.next_vector();
        if v.is_some() {
            self.emitted.fetch_add(1, Ordering::SeqCst);
        }
        v
    }
}

impl<S: PositiveSource> PositiveSource for CountingSource<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn default_rate(&self) -> f64 {
        self.inner.default_rate()
    }

    fn resolve(&self, query: &str) -> Result<Box<dyn Feed>> {
        Ok(Box::new(CountingFeed {
            inner: self.inner.resolve(query)?,
            emitted: self.emitted.clone(),
        }))
    }

    fn classes(&self) -> Vec<String> {
        self.inner.classes()
    }
}
