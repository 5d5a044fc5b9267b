use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Timeline;
use crate::verbs::{
    AccessFlags, Api, CompletionQueue, DeviceContext, Fabric, Host, HostConfig, ProtectionDomain,
    QueuePair, VerbsError,
};

use super::{
    CacheDispatch, CacheError, CacheMap, CacheSource, FunctionRegistry, Observation, Value,
};

/// Minimum calls before a function can be called constant.
pub const MIN_CALLS: u64 = 8;
/// Minimum distinct API orderings a function must be seen under.
pub const MIN_ORDERINGS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FunctionProfile {
    pub calls: u64,
    /// Observed return value -> how often.
    pub values: BTreeMap<Value, u64>,
    /// Distinct trial orderings the function was observed under.
    pub orderings: usize,
    pub constant: bool,
}

impl FunctionProfile {
    /// The single observed value of a constant function.
    pub fn constant_value(&self) -> Option<Value> {
        if self.constant {
            self.values.keys().next().copied()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub seed: u64,
    pub trials: usize,
    pub apis: Vec<Api>,
    pub functions: BTreeMap<String, FunctionProfile>,
}

impl ProfileReport {
    pub fn get(&self, name: &str) -> Option<&FunctionProfile> {
        self.functions.get(name)
    }

    pub fn constant_functions(&self) -> impl Iterator<Item = &str> {
        self.functions
            .iter()
            .filter(|(_, f)| f.constant)
            .map(|(n, _)| n.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report is always serialisable")
    }
}

/// A fixed sequence of API calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub apis: Vec<Api>,
}

impl Workload {
    /// `len` calls drawn uniformly from `api_set`.
    pub fn random(api_set: &[Api], len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let apis = if api_set.is_empty() {
            Vec::new()
        } else {
            (0..len)
                .map(|_| api_set[rng.random_range(0..api_set.len())])
                .collect()
        };
        Self { apis }
    }
}

/// A minimal process that can issue any [`Api`], creating whatever
/// parent resources are missing on the way.
struct Session {
    host: Arc<Host>,
    dispatch: Arc<CacheDispatch>,
    timeline: Timeline,
    rng: ChaCha8Rng,
    ctx: Option<DeviceContext>,
    pd: Option<ProtectionDomain>,
    cq: Option<CompletionQueue>,
    qps: Vec<QueuePair>,
}

impl Session {
    fn new(host: Arc<Host>, dispatch: Arc<CacheDispatch>, seed: u64) -> Self {
        Self {
            host,
            dispatch,
            timeline: Timeline::starting_at(Duration::ZERO),
            rng: ChaCha8Rng::seed_from_u64(seed),
            ctx: None,
            pd: None,
            cq: None,
            qps: Vec::new(),
        }
    }

    fn ctx(&mut self) -> Result<DeviceContext, VerbsError> {
        if self.ctx.is_none() {
            self.exec(Api::OpenDevice)?;
        }
        Ok(self.ctx.clone().expect("opened above"))
    }

    fn pd(&mut self) -> Result<ProtectionDomain, VerbsError> {
        if self.pd.is_none() {
            self.exec(Api::AllocPd)?;
        }
        Ok(self.pd.clone().expect("allocated above"))
    }

    fn cq(&mut self) -> Result<CompletionQueue, VerbsError> {
        if self.cq.is_none() {
            let cq = self.ctx()?.create_cq(crate::verbs::DEFAULT_QUEUE_DEPTH)?;
            self.cq = Some(cq);
        }
        Ok(self.cq.clone().expect("created above"))
    }

    fn exec(&mut self, api: Api) -> Result<(), VerbsError> {
        match api {
            Api::GetDeviceList => {
                self.host.get_device_list(&self.dispatch, &self.timeline)?;
            }
            Api::OpenDevice => {
                let dev = *self
                    .host
                    .devices()
                    .first()
                    .ok_or(VerbsError::UnknownDevice(crate::verbs::DeviceId {
                        host: self.host.id(),
                        index: 0,
                    }))?;
                let ctx = self
                    .host
                    .open_device(dev, self.dispatch.clone(), &self.timeline)?;
                self.ctx = Some(ctx);
            }
            Api::AllocPd => {
                let pd = self.ctx()?.alloc_pd()?;
                self.pd = Some(pd);
            }
            Api::RegMr => {
                let len = [4096, 8192, 32 * 1024][self.rng.random_range(0..3)];
                self.pd()?.reg_mr(len, AccessFlags::ALL)?;
            }
            Api::CreateQp => {
                let cq = self.cq()?;
                let qp = self.pd()?.create_qp(&cq)?;
                self.qps.push(qp);
            }
            // Profiled as a whole connection: every step of the chain runs.
            Api::ModifyQp => {
                while self.qps.len() < 2 {
                    self.exec(Api::CreateQp)?;
                }
                let (a, b) = (self.qps[0].clone(), self.qps[1].clone());
                if a.state() != crate::verbs::QpState::Reset {
                    a.reset();
                }
                a.connect(b.endpoint())?;
            }
        }
        Ok(())
    }

    fn close(self) {
        for qp in &self.qps {
            qp.close();
        }
    }
}

/// A private copy of `host` on its own fabric, so profiling and replays
/// leave the live host untouched.
fn shadow_host(config: &HostConfig, registry: &Arc<FunctionRegistry>) -> Arc<Host> {
    let mut config = config.clone();
    config.registry = Some(registry.clone());
    Fabric::new(0).add_host(config)
}

fn workload_error(e: VerbsError) -> CacheError {
    match e {
        VerbsError::Cache(c) => c,
        other => CacheError::Workload(other.to_string()),
    }
}

/// Runs `trials` random orderings of `api_set`, with random repeats, against an
/// uncached copy of `host`, recording every internal function's returns.
pub fn profile(
    host: &Host,
    api_set: &[Api],
    trials: usize,
    seed: u64,
) -> Result<ProfileReport, CacheError> {
    if api_set.is_empty() {
        return Err(CacheError::EmptyApiSet);
    }
    if trials == 0 {
        return Err(CacheError::ZeroTrials);
    }
    let shadow = shadow_host(host.config(), host.registry());
    let recorder = Arc::new(Mutex::new(Vec::<Observation>::new()));
    let dispatch = Arc::new(
        CacheDispatch::uncached(shadow.registry().clone(), shadow.env().clone())
            .with_recorder(recorder.clone()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut apis: Vec<Api> = api_set.to_vec();
    apis.sort();
    apis.dedup();

    let mut calls: BTreeMap<String, FunctionProfile> = BTreeMap::new();
    let mut seen_under: BTreeMap<String, BTreeSet<Vec<Api>>> = BTreeMap::new();
    for _ in 0..trials {
        // Every API once plus a random number of repeats, in random order.
        let mut order = apis.clone();
        let extra = rng.random_range(0..=apis.len());
        order.extend((0..extra).map(|_| apis[rng.random_range(0..apis.len())]));
        order.shuffle(&mut rng);

        let mut session = Session::new(shadow.clone(), dispatch.clone(), rng.random());
        let result = order.iter().try_for_each(|api| session.exec(*api));
        session.close();
        result.map_err(workload_error)?;

        for obs in recorder.lock().drain(..) {
            let p = calls.entry(obs.function.clone()).or_default();
            p.calls += 1;
            *p.values.entry(obs.value).or_insert(0) += 1;
            seen_under
                .entry(obs.function)
                .or_default()
                .insert(order.clone());
        }
    }
    for (name, p) in calls.iter_mut() {
        p.orderings = seen_under.get(name).map_or(0, BTreeSet::len);
        p.constant = p.values.len() == 1 && p.calls >= MIN_CALLS && p.orderings >= MIN_ORDERINGS;
    }
    Ok(ProfileReport {
        seed,
        trials,
        apis,
        functions: calls,
    })
}

/// Keeps every function the report found constant and the registry
/// declares idempotent.
pub fn build_cache(report: &ProfileReport, registry: &FunctionRegistry) -> CacheMap {
    let entries = report
        .functions
        .iter()
        .filter(|(name, _)| registry.get(name).is_some_and(|f| f.declared_idempotent))
        .filter_map(|(name, p)| Some((name.clone(), p.constant_value()?)))
        .collect();
    CacheMap {
        generation: 1,
        entries,
    }
}

fn replay(
    config: &HostConfig,
    registry: &Arc<FunctionRegistry>,
    source: CacheSource,
    workload: &Workload,
    seed: u64,
) -> Result<Vec<Observation>, CacheError> {
    let shadow = shadow_host(config, registry);
    let recorder = Arc::new(Mutex::new(Vec::new()));
    let dispatch = Arc::new(
        CacheDispatch::new(shadow.registry().clone(), shadow.env().clone(), source)
            .with_recorder(recorder.clone()),
    );
    let mut session = Session::new(shadow, dispatch, seed);
    let result = workload.apis.iter().try_for_each(|api| session.exec(*api));
    session.close();
    result.map_err(workload_error)?;
    let out = std::mem::take(&mut *recorder.lock());
    Ok(out)
}

/// Replays `workload` on two fresh copies of `host`, once through `cache`
/// and once uncached. True iff every internal call returned the same value.
pub fn verify_cache(
    host: &Host,
    cache: &CacheMap,
    workload: &Workload,
    seed: u64,
) -> Result<bool, CacheError> {
    let registry = host.registry();
    let cached = replay(
        host.config(),
        registry,
        CacheSource::Fixed(Arc::new(cache.clone())),
        workload,
        seed,
    )?;
    let plain = replay(
        host.config(),
        registry,
        CacheSource::Uncached,
        workload,
        seed,
    )?;
    Ok(cached.len() == plain.len()
        && cached
            .iter()
            .zip(&plain)
            .all(|(a, b)| a.function == b.function && a.value == b.value))
}

/// Owns the profile/install cycle of one host's cache.
#[derive(Debug)]
pub struct CacheManager {
    host: Arc<Host>,
    apis: Vec<Api>,
    trials: usize,
    seed: u64,
    period: Option<Duration>,
    runs: AtomicU64,
}

impl CacheManager {
    pub fn new(host: Arc<Host>, trials: usize, seed: u64) -> Self {
        Self {
            host,
            apis: Api::ALL.to_vec(),
            trials,
            seed,
            period: None,
            runs: AtomicU64::new(0),
        }
    }

    /// Re-profile whenever `period` of virtual time has passed.
    pub fn with_period(mut self, period: Option<Duration>) -> Self {
        self.period = period;
        self
    }

    pub fn with_apis(mut self, apis: Vec<Api>) -> Self {
        self.apis = apis;
        self
    }

    pub fn host(&self) -> &Arc<Host> {
        &self.host
    }

    pub fn runs(&self) -> u64 {
        self.runs.load(Ordering::SeqCst)
    }

    /// Profiles, builds and installs a fresh cache.
    pub fn reprofile(&self, now: Duration) -> Result<ProfileReport, CacheError> {
        let run = self.runs.fetch_add(1, Ordering::SeqCst);
        let report = profile(
            &self.host,
            &self.apis,
            self.trials,
            self.seed.wrapping_add(run),
        )?;
        let map = build_cache(&report, self.host.registry());
        let cell = self.host.cache();
        cell.install(map);
        cell.mark_profiled(now);
        Ok(report)
    }

    /// Re-profiles if an error invalidated the cache or the period elapsed.
    /// Returns whether a re-profile ran.
    pub fn maintain(&self, now: Duration) -> Result<bool, CacheError> {
        let cell = self.host.cache();
        let due = match (self.period, cell.last_profiled()) {
            (Some(period), Some(last)) => now >= last + period,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if cell.reprofile_pending() || due {
            self.reprofile(now)?;
            return Ok(true);
        }
        Ok(false)
    }
}
