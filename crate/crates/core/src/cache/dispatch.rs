use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::Timeline;
use crate::verbs::HostEnv;

use super::{CacheCell, CacheError, CacheMap, FunctionRegistry, Value};

/// Where a dispatcher looks up cached values.
#[derive(Debug, Clone)]
pub enum CacheSource {
    /// Every call executes.
    Uncached,
    /// The host's live cache.
    Shared(Arc<CacheCell>),
    /// A frozen map, used for replays.
    Fixed(Arc<CacheMap>),
}

/// One dispatched call, as seen by a recorder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub function: String,
    pub value: Value,
    pub hit: bool,
}

pub type Recorder = Arc<Mutex<Vec<Observation>>>;

/// Routes internal function calls either to the cache or to the
/// implementation.
#[derive(Debug)]
pub struct CacheDispatch {
    registry: Arc<FunctionRegistry>,
    env: Arc<HostEnv>,
    source: CacheSource,
    hits: AtomicU64,
    misses: AtomicU64,
    recorder: Option<Recorder>,
}

impl CacheDispatch {
    pub fn new(registry: Arc<FunctionRegistry>, env: Arc<HostEnv>, source: CacheSource) -> Self {
        Self {
            registry,
            env,
            source,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            recorder: None,
        }
    }

    pub fn uncached(registry: Arc<FunctionRegistry>, env: Arc<HostEnv>) -> Self {
        Self::new(registry, env, CacheSource::Uncached)
    }

    pub fn with_recorder(mut self, recorder: Recorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn registry(&self) -> &Arc<FunctionRegistry> {
        &self.registry
    }

    pub fn env(&self) -> &Arc<HostEnv> {
        &self.env
    }

    pub fn source(&self) -> &CacheSource {
        &self.source
    }

    pub fn is_cached(&self) -> bool {
        !matches!(self.source, CacheSource::Uncached)
    }

    /// The map this dispatcher would consult right now.
    pub fn snapshot(&self) -> Option<Arc<CacheMap>> {
        match &self.source {
            CacheSource::Uncached => None,
            CacheSource::Shared(cell) => Some(cell.snapshot()),
            CacheSource::Fixed(map) => Some(map.clone()),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.hits() + self.misses()
    }

    /// Dispatches a single call against a fresh snapshot.
    pub fn dispatch(
        &self,
        name: &str,
        args: &[Value],
        timeline: &Timeline,
    ) -> Result<Value, CacheError> {
        let snap = self.snapshot();
        self.call(snap.as_deref(), name, args, timeline)
    }

    /// Dispatches a chain of calls against one snapshot, so the whole chain
    /// sees a single cache generation.
    pub fn run_chain(
        &self,
        calls: &[(&str, &[Value])],
        timeline: &Timeline,
    ) -> Result<Vec<Value>, CacheError> {
        let snap = self.snapshot();
        calls
            .iter()
            .map(|(name, args)| self.call(snap.as_deref(), name, args, timeline))
            .collect()
    }

    fn call(
        &self,
        snap: Option<&CacheMap>,
        name: &str,
        args: &[Value],
        timeline: &Timeline,
    ) -> Result<Value, CacheError> {
        let f = self
            .registry
            .get(name)
            .ok_or_else(|| CacheError::Unregistered(name.to_owned()))?;
        let (value, hit) = match snap.and_then(|m| m.get(name)) {
            Some(v) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                (v, true)
            }
            None => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                timeline.charge(name, f.cost);
                (f.call(&self.env, args), false)
            }
        };
        if let Some(rec) = &self.recorder {
            rec.lock().push(Observation {
                function: name.to_owned(),
                value,
                hit,
            });
        }
        Ok(value)
    }

    /// A control-plane call failed. If it went through a live cache, the
    /// whole cache is dropped and a re-profile is owed.
    pub fn report_error(&self) {
        if let CacheSource::Shared(cell) = &self.source {
            if !cell.snapshot().is_empty() {
                cell.invalidate_on_error();
            }
        }
    }
}
