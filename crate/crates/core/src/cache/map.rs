use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{CacheError, Value};

/// Function name -> cached constant return value.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheMap {
    pub generation: u64,
    pub entries: BTreeMap<String, Value>,
}

impl CacheMap {
    pub fn get(&self, name: &str) -> Option<Value> {
        self.entries.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("cache map is always serialisable")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CacheError> {
        toml::from_str(text).map_err(|e| CacheError::Persist(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CacheError> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| CacheError::Persist(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let text = std::fs::read_to_string(path).map_err(|e| CacheError::Persist(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// The single cache map of a host.
///
/// Readers take an `Arc` snapshot, so a reader sees one whole generation.
/// Writers replace the snapshot wholesale.
#[derive(Debug, Default)]
pub struct CacheCell {
    map: RwLock<Arc<CacheMap>>,
    reprofile_pending: AtomicBool,
    last_profiled: Mutex<Option<Duration>>,
    invalidations: AtomicU64,
}

impl CacheCell {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<CacheMap> {
        self.map.read().clone()
    }

    pub fn generation(&self) -> u64 {
        self.map.read().generation
    }

    /// Installs `entries` as the next generation and returns that generation.
    pub fn install(&self, map: CacheMap) -> u64 {
        let mut cur = self.map.write();
        let generation = cur.generation.max(map.generation.saturating_sub(1)) + 1;
        *cur = Arc::new(CacheMap {
            generation,
            entries: map.entries,
        });
        self.reprofile_pending.store(false, Ordering::SeqCst);
        generation
    }

    pub fn invalidate(&self, names: &[&str]) {
        let mut cur = self.map.write();
        let mut next = (**cur).clone();
        for n in names {
            next.entries.remove(*n);
        }
        next.generation += 1;
        *cur = Arc::new(next);
        self.invalidations.fetch_add(1, Ordering::SeqCst);
    }

    pub fn invalidate_all(&self) {
        let mut cur = self.map.write();
        *cur = Arc::new(CacheMap {
            generation: cur.generation + 1,
            entries: BTreeMap::new(),
        });
        self.invalidations.fetch_add(1, Ordering::SeqCst);
    }

    /// Invalidate everything because a cached path failed; a re-profile is
    /// owed before the cache is used again.
    pub fn invalidate_on_error(&self) {
        self.invalidate_all();
        self.reprofile_pending.store(true, Ordering::SeqCst);
    }

    pub fn reprofile_pending(&self) -> bool {
        self.reprofile_pending.load(Ordering::SeqCst)
    }

    pub fn invalidations(&self) -> u64 {
        self.invalidations.load(Ordering::SeqCst)
    }

    pub fn last_profiled(&self) -> Option<Duration> {
        *self.last_profiled.lock()
    }

    pub fn mark_profiled(&self, at: Duration) {
        *self.last_profiled.lock() = Some(at);
    }
}
