//! Profiling and caching of constant-return internal control-plane
//! functions.
//!
//! A [`FunctionRegistry`] names every internal subroutine the verbs layer
//! runs. The profiler drives random API workloads through an uncached
//! dispatcher, records each function's return values, and
//! [`build_cache`] keeps the ones that were constant and are declared
//! idempotent. A [`CacheDispatch`] then serves those from the host's
//! [`CacheCell`] at zero cost.

mod dispatch;
mod map;
mod profile;
mod registry;

use thiserror::Error;

pub use dispatch::{CacheDispatch, CacheSource, Observation, Recorder};
pub use map::{CacheCell, CacheMap};
pub use profile::{
    build_cache, profile, verify_cache, CacheManager, FunctionProfile, ProfileReport, Workload,
    MIN_CALLS, MIN_ORDERINGS,
};
pub use registry::{names, FunctionImpl, FunctionRegistry, RegisteredFunction};

/// Return value of an internal function.
pub type Value = i64;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("function `{0}` is already registered")]
    Duplicate(String),
    #[error("function `{0}` is not registered")]
    Unregistered(String),
    #[error("cache persistence failed: {0}")]
    Persist(String),
    #[error("profiling needs at least one API")]
    EmptyApiSet,
    #[error("profiling needs at least one trial")]
    ZeroTrials,
    #[error("profiling workload failed: {0}")]
    Workload(String),
}
