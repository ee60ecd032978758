//! Small concurrency helpers shared by the live session threads.

use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

/// Holds the latest published immutable value. Readers clone an `Arc`;
/// writers swap the pointer.
#[derive(Debug)]
pub struct Slot<T> {
    inner: RwLock<Option<Arc<T>>>,
}

impl<T> Default for Slot<T> {
    fn default() -> Self {
        Slot {
            inner: RwLock::new(None),
        }
    }
}

impl<T> Slot<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&self) -> Option<Arc<T>> {
        self.inner.read().unwrap().clone()
    }

    pub fn store(&self, value: Arc<T>) {
        *self.inner.write().unwrap() = Some(value);
    }
}

/// One-shot stop flag that sleeping threads can wait on.
#[derive(Debug, Default)]
pub struct StopSignal {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        *self.stopped.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.stopped.lock().unwrap()
    }

    /// Sleeps until `deadline` or until stopped. Returns `true` when stopped.
    pub fn wait_until(&self, deadline: Instant) -> bool {
        let mut stopped = self.stopped.lock().unwrap();
        loop {
            if *stopped {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            stopped = self.cv.wait_timeout(stopped, deadline - now).unwrap().0;
        }
    }

    pub fn wait_for(&self, d: Duration) -> bool {
        self.wait_until(Instant::now() + d)
    }
}
