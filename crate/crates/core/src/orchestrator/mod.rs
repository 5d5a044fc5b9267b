//! The scheduler and its INIT processes.
//!
//! A request for a (user, function) pair with no container is a cold start.
//! Otherwise a normal-latency request execs a fresh INIT process in the
//! existing container (warm start) and a fast request forks an INIT process
//! that already holds connections (fork start).
//!
//! Every INIT runs runtime initialisation and RDMA setup on two parallel
//! timelines, so setup is only visible when it outlasts the runtime. QPs are
//! owned by the INIT through a [`QpTable`] and an [`AssignmentTable`] that
//! only it may write.

pub mod config;
pub mod events;
pub mod handler;
pub mod init;
pub mod tables;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cache::{CacheDispatch, CacheError, CacheManager};
use crate::clock::{as_micros, micros, Timeline, VirtualClock};
use crate::fork::{ForkError, Pid, ProcessTable, RdmaView};
use crate::verbs::{
    DeviceContext, Fabric, Gid, Host, HostConfig, QpState, QueuePair, ServerConfig, VerbsError,
};

pub use config::{BuiltinHandler, CacheConfig, HandlerBinding, PoolConfig, ScenarioConfig, Scheme};
pub use events::{EventLog, EventRecord};
pub use handler::{builtin, Event, FunctionContext, HandlerFn};
pub use init::{writer_id, InitProcess, InitRdma};
pub use tables::{
    select, Assignment, AssignmentTable, ContainerId, ContainerRecord, InitRecord,
    OrchestratorTable, QpTable, TableError, WriterId,
};

use init::{rdma_setup, Release};

/// Pids of different containers never collide.
const PIDS_PER_CONTAINER: Pid = 100_000;

/// QPs handed to one handler invocation.
const QPS_PER_REQUEST: usize = 1;

/// QP ids used by a handler and what it returned.
type Invocation = (Vec<usize>, Result<Vec<u8>, String>);

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("no container {0}")]
    UnknownContainer(ContainerId),
    #[error("INIT {init} has no unassigned QP left")]
    Exhausted { init: Pid },
    #[error("INIT process failed twice: {0}")]
    InitFailed(VerbsError),
    #[error("no handler bound to function `{0}`")]
    UnknownFunction(String),
    #[error("container {0} has no INIT process")]
    NoInit(ContainerId),
    #[error("scheme has no RDMA resources")]
    NoRdma,
    #[error(transparent)]
    Verbs(#[from] VerbsError),
    #[error(transparent)]
    Fork(#[from] ForkError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Cold,
    Warm,
    Fork,
}

impl StartKind {
    pub const ALL: [StartKind; 3] = [StartKind::Cold, StartKind::Warm, StartKind::Fork];

    pub fn name(self) -> &'static str {
        match self {
            StartKind::Cold => "cold",
            StartKind::Warm => "warm",
            StartKind::Fork => "fork",
        }
    }
}

impl std::fmt::Display for StartKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StartKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cold" => Ok(StartKind::Cold),
            "warm" => Ok(StartKind::Warm),
            "fork" => Ok(StartKind::Fork),
            other => Err(format!("unknown start kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyClass {
    #[default]
    Normal,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestSpec {
    pub user: String,
    pub function: String,
    /// Where the handler's QPs must be connected. `None` means the default
    /// server.
    pub destination: Option<Gid>,
    pub class: LatencyClass,
    pub payload: Vec<u8>,
}

impl RequestSpec {
    pub fn new(user: &str, function: &str, class: LatencyClass) -> Self {
        Self {
            user: user.to_owned(),
            function: function.to_owned(),
            destination: None,
            class,
            payload: Vec::new(),
        }
    }

    pub fn to(mut self, destination: Gid) -> Self {
        self.destination = Some(destination);
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }
}

/// Where a request's time went, in virtual microseconds.
///
/// `end_to_end = task_launch + visible_control_plane + data_exchange`
/// always holds; `rdma_setup`, `runtime_init` and `init_elapsed` describe
/// the INIT's two tracks for cold and warm starts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub task_launch: f64,
    pub visible_control_plane: f64,
    pub data_exchange: f64,
    pub end_to_end: f64,
    pub rdma_setup: f64,
    pub runtime_init: f64,
    pub init_elapsed: f64,
    /// Time spent waiting for the INIT listener or for a free QP.
    pub queue_wait: f64,
}

impl TimingBreakdown {
    /// Share of end-to-end time spent in the visible control plane.
    pub fn control_plane_share(&self) -> f64 {
        if self.end_to_end == 0.0 {
            0.0
        } else {
            self.visible_control_plane / self.end_to_end
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutcome {
    pub start: StartKind,
    /// A fast request that found no container and went cold instead.
    pub fell_back: bool,
    pub container: ContainerId,
    /// The process that ran the handler.
    pub pid: Pid,
    pub timing: TimingBreakdown,
    pub result: Result<Vec<u8>, String>,
    pub qp_ids: Vec<usize>,
    pub arrived: Duration,
    pub finished: Duration,
}

/// A forked child's own device and QPs, torn down when it exits.
#[derive(Debug)]
struct PrivateRdma {
    ctx: DeviceContext,
    qps: Vec<QueuePair>,
}

#[derive(Debug)]
struct Container {
    user: String,
    function: String,
    tag: String,
    procs: ProcessTable,
    inits: BTreeMap<Pid, InitProcess>,
    private: BTreeMap<Pid, PrivateRdma>,
}

/// Result of one INIT's pipelined setup.
struct InitRun {
    init: InitProcess,
    rdma_setup: Duration,
    runtime_init: Duration,
    elapsed: Duration,
}

pub struct Orchestrator {
    config: ScenarioConfig,
    scheme: Scheme,
    fabric: Fabric,
    worker: Arc<Host>,
    server_host: Arc<Host>,
    default_destination: Gid,
    cache: Option<CacheManager>,
    clock: VirtualClock,
    table: OrchestratorTable,
    containers: BTreeMap<ContainerId, Container>,
    next_container: ContainerId,
    handlers: BTreeMap<String, HandlerFn>,
    events: EventLog,
    served: BTreeMap<ContainerId, BTreeSet<String>>,
    jitter: ChaCha8Rng,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("scheme", &self.scheme)
            .field("containers", &self.containers.len())
            .field("now", &self.clock.now())
            .finish()
    }
}

impl Orchestrator {
    /// A worker host, a server host listening on device 0, and for cached
    /// schemes a cache profiled at time zero.
    pub fn new(
        config: ScenarioConfig,
        scheme: Scheme,
        seed: u64,
    ) -> Result<Self, OrchestratorError> {
        let fabric = Fabric::new(seed);
        let worker = fabric.add_host(HostConfig {
            name: "worker".into(),
            kernel_mediated: scheme.kernel_mediated(),
            seed,
            ..HostConfig::with_costs(config.costs.clone())
        });
        let server_host = fabric.add_host(HostConfig {
            name: "server".into(),
            seed: seed.wrapping_add(1),
            ..HostConfig::with_costs(config.costs.clone())
        });
        let default_destination = fabric.serve(&server_host, ServerConfig::default())?;
        let cache = if scheme.cached() {
            let mgr = CacheManager::new(worker.clone(), config.cache.trials, seed)
                .with_period(config.cache.reprofile_period_s.map(Duration::from_secs_f64));
            mgr.reprofile(Duration::ZERO)?;
            Some(mgr)
        } else {
            None
        };
        let handlers = config
            .handlers
            .iter()
            .map(|b| (b.function.clone(), builtin(b.handler)))
            .collect();
        let mut events = EventLog::default();
        events.push(
            Duration::ZERO,
            "scheduler",
            "start",
            json!({"scheme": scheme.name(), "seed": seed}),
        );
        Ok(Self {
            config,
            scheme,
            fabric,
            worker,
            server_host,
            default_destination,
            cache,
            clock: VirtualClock::new(),
            table: OrchestratorTable::new(),
            containers: BTreeMap::new(),
            next_container: 1,
            handlers,
            events,
            served: BTreeMap::new(),
            jitter: ChaCha8Rng::seed_from_u64(seed ^ 0x6a69_7474_6572),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn worker(&self) -> &Arc<Host> {
        &self.worker
    }

    pub fn server_host(&self) -> &Arc<Host> {
        &self.server_host
    }

    pub fn default_destination(&self) -> Gid {
        self.default_destination
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn table(&self) -> &OrchestratorTable {
        &self.table
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn cache_manager(&self) -> Option<&CacheManager> {
        self.cache.as_ref()
    }

    /// Starts another server on its own host and returns its gid.
    pub fn add_server(&mut self) -> Result<Gid, OrchestratorError> {
        let host = self.fabric.add_host(HostConfig {
            name: format!("server-{}", self.fabric.hosts().len()),
            ..HostConfig::with_costs(self.config.costs.clone())
        });
        // The listener's protection domain keeps the host alive.
        Ok(self.fabric.serve(&host, ServerConfig::default())?)
    }

    /// Binds `function` to a custom handler.
    pub fn register_handler(&mut self, function: &str, handler: HandlerFn) {
        self.handlers.insert(function.to_owned(), handler);
    }

    pub fn container_of(&self, user: &str, function: &str) -> Option<ContainerId> {
        self.table.find(user, function)
    }

    pub fn container_ids(&self) -> Vec<ContainerId> {
        self.containers.keys().copied().collect()
    }

    pub fn container_tag(&self, id: ContainerId) -> Option<&str> {
        self.containers.get(&id).map(|c| c.tag.as_str())
    }

    pub fn inits(&self, id: ContainerId) -> Vec<&InitProcess> {
        self.containers
            .get(&id)
            .map(|c| c.inits.values().collect())
            .unwrap_or_default()
    }

    pub fn init(&self, id: ContainerId, pid: Pid) -> Option<&InitProcess> {
        self.containers.get(&id)?.inits.get(&pid)
    }

    pub fn processes(&self, id: ContainerId) -> Option<&ProcessTable> {
        self.containers.get(&id).map(|c| &c.procs)
    }

    /// Users whose requests a container has served.
    pub fn served_users(&self, id: ContainerId) -> Vec<String> {
        self.served
            .get(&id)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Serves `spec` arriving now, then moves the clock to its completion.
    pub fn handle_request(
        &mut self,
        spec: &RequestSpec,
    ) -> Result<RequestOutcome, OrchestratorError> {
        let out = self.handle_request_at(spec, self.clock.now())?;
        self.clock.advance_to(out.finished);
        Ok(out)
    }

    /// Serves `spec` arriving at `at`. The clock moves to `at` but not past
    /// it, so several requests can arrive at the same instant.
    pub fn handle_request_at(
        &mut self,
        spec: &RequestSpec,
        at: Duration,
    ) -> Result<RequestOutcome, OrchestratorError> {
        self.clock.advance_to(at);
        let at = self.clock.now();
        self.tick(at)?;
        let dest = spec.destination.unwrap_or(self.default_destination);
        if !self.handlers.contains_key(&spec.function) {
            return Err(OrchestratorError::UnknownFunction(spec.function.clone()));
        }
        self.events.push(
            at,
            "scheduler",
            "request",
            json!({"user": spec.user, "function": spec.function, "class": spec.class, "destination": dest.to_string()}),
        );
        let out = match (self.table.find(&spec.user, &spec.function), spec.class) {
            (None, class) => {
                let mut out = self.cold_start(spec, dest, at)?;
                out.fell_back = class == LatencyClass::Fast;
                out
            }
            (Some(id), LatencyClass::Normal) => self.warm_start(id, spec, dest, at)?,
            (Some(id), LatencyClass::Fast) => self.fork_start(id, spec, dest, at)?,
        };
        self.served
            .entry(out.container)
            .or_default()
            .insert(spec.user.clone());
        self.events.push(
            out.finished,
            "scheduler",
            "done",
            json!({
                "start": out.start,
                "container": out.container,
                "pid": out.pid,
                "fell_back": out.fell_back,
                "end_to_end_us": out.timing.end_to_end,
                "ok": out.result.is_ok(),
            }),
        );
        Ok(out)
    }

    /// Processes every release due by `now` and lets the cache manager run.
    pub fn tick(&mut self, now: Duration) -> Result<(), OrchestratorError> {
        for id in self.container_ids() {
            self.run_releases(id, |r| r.at <= now)?;
        }
        if let Some(mgr) = &self.cache {
            if mgr.maintain(now)? {
                self.events
                    .push(now, "cache", "reprofile", json!({"runs": mgr.runs()}));
            }
        }
        Ok(())
    }

    fn run_releases(
        &mut self,
        id: ContainerId,
        due: impl Fn(&Release) -> bool,
    ) -> Result<(), OrchestratorError> {
        let Some(c) = self.containers.get_mut(&id) else {
            return Ok(());
        };
        for init_pid in c.inits.keys().copied().collect::<Vec<_>>() {
            let init = c.inits.get_mut(&init_pid).expect("listed above");
            let (ready, keep): (Vec<_>, Vec<_>) = init.releases.drain(..).partition(&due);
            init.releases = keep;
            for r in ready {
                let ids = init.release_qps(r.pid)?;
                if r.exits {
                    if let Some(p) = c.private.remove(&r.pid) {
                        for qp in &p.qps {
                            qp.close();
                        }
                        p.ctx.close();
                    }
                    c.procs.exit_process(r.pid)?;
                }
                self.events.push(
                    r.at,
                    format!("init-{init_pid}"),
                    "release",
                    json!({"pid": r.pid, "qps": ids, "exit": r.exits}),
                );
            }
            let conns = init.connections();
            self.table.set_connections(id, init_pid, conns);
        }
        Ok(())
    }

    /// Releases everything pending, whatever its due time.
    pub fn drain(&mut self) -> Result<(), OrchestratorError> {
        let latest = self
            .containers
            .values()
            .flat_map(|c| c.inits.values())
            .flat_map(|i| i.releases.iter().map(|r| r.at))
            .max();
        if let Some(t) = latest {
            self.clock.advance_to(t);
        }
        for id in self.container_ids() {
            self.run_releases(id, |_| true)?;
        }
        Ok(())
    }

    fn dispatch(&self) -> Arc<CacheDispatch> {
        if self.scheme.cached() {
            self.worker.cached_dispatch()
        } else {
            self.worker.uncached_dispatch()
        }
    }

    fn launch_jitter(&mut self) -> Duration {
        let j = self.config.costs.launch_jitter;
        if j > 0.0 {
            micros(self.jitter.random_range(0.0..j))
        } else {
            Duration::ZERO
        }
    }

    /// Runs an INIT process in container `id`, starting on `main`. The two
    /// tracks are joined back into `main`.
    fn run_init(
        &mut self,
        id: ContainerId,
        dest: Gid,
        runtime: Duration,
        main: &Timeline,
    ) -> Result<InitRun, OrchestratorError> {
        let start = main.now();
        let a = main.branch();
        a.charge("runtime_init", runtime);
        let b = main.branch();
        let pool = self.config.pool;
        let scheme = self.scheme;
        let c = self
            .containers
            .get_mut(&id)
            .ok_or(OrchestratorError::UnknownContainer(id))?;
        let tag = c.tag.clone();
        let mut setup = None;
        if scheme.uses_rdma() {
            let first = self.dispatch();
            let attempt = rdma_setup(&self.worker, first, dest, pool.initial_qps, &tag, &b);
            setup = Some(match attempt {
                Ok(ok) => ok,
                Err(first_err) => {
                    // The failing call already invalidated the cache.
                    self.events.push(
                        b.now(),
                        "init",
                        "setup_failed",
                        json!({"error": first_err.to_string(), "retry": "uncached"}),
                    );
                    sweep_tag(&self.fabric, &tag);
                    match rdma_setup(
                        &self.worker,
                        self.worker.uncached_dispatch(),
                        dest,
                        pool.initial_qps,
                        &tag,
                        &b,
                    ) {
                        Ok(ok) => ok,
                        Err(e) => {
                            sweep_tag(&self.fabric, &tag);
                            main.join(&[&a, &b]);
                            return Err(OrchestratorError::InitFailed(e));
                        }
                    }
                }
            });
        }
        let rdma_time = b.now() - start;
        main.join(&[&a, &b]);
        let c = self.containers.get_mut(&id).expect("checked above");
        let (rdma, qps) = match setup {
            Some((r, q)) => (Some(r), q),
            None => (None, Vec::new()),
        };
        let view = rdma.as_ref().map(|r| RdmaView {
            ctx: r.ctx.clone(),
            pd: r.pd.clone(),
        });
        let pid = c.procs.spawn(view);
        if let (Some(r), Some(p)) = (&rdma, c.procs.get_mut(pid)) {
            // Kernel-mediated connections live in the kernel, so the INIT
            // holds nothing copy-on-fork has to protect.
            if !scheme.kernel_mediated() {
                p.mrs.push(r.mr.clone());
                p.qps_held = qps.len();
            }
        }
        let init = InitProcess::new(pid, id, rdma, qps, dest, pool, main.now())?;
        Ok(InitRun {
            init,
            rdma_setup: rdma_time,
            runtime_init: runtime,
            elapsed: main.now() - start,
        })
    }

    fn new_container(&mut self, spec: &RequestSpec) -> ContainerId {
        let id = self.next_container;
        self.next_container += 1;
        self.containers.insert(
            id,
            Container {
                user: spec.user.clone(),
                function: spec.function.clone(),
                tag: format!("container-{id}"),
                procs: ProcessTable::new(id as Pid * PIDS_PER_CONTAINER + 1),
                inits: BTreeMap::new(),
                private: BTreeMap::new(),
            },
        );
        id
    }

    fn install_init(&mut self, id: ContainerId, run: InitRun, at: Duration, kind: StartKind) {
        let pid = run.init.pid;
        let conns = run.init.connections();
        self.events.push(
            at,
            format!("init-{pid}"),
            "init",
            json!({
                "container": id,
                "start": kind,
                "qps": run.init.qp_table().len(),
                "rdma_setup_us": as_micros(run.rdma_setup),
                "runtime_init_us": as_micros(run.runtime_init),
                "elapsed_us": as_micros(run.elapsed),
            }),
        );
        self.table.add_init(
            id,
            InitRecord {
                pid,
                connections: conns,
            },
        );
        if let Some(c) = self.containers.get_mut(&id) {
            c.inits.insert(pid, run.init);
        }
    }

    fn cold_start(
        &mut self,
        spec: &RequestSpec,
        dest: Gid,
        at: Duration,
    ) -> Result<RequestOutcome, OrchestratorError> {
        let id = self.new_container(spec);
        self.table.insert(
            id,
            ContainerRecord {
                user: spec.user.clone(),
                function: spec.function.clone(),
                inits: Vec::new(),
            },
        );
        let main = Timeline::with_mode(at, self.clock.mode(), false);
        let launch = micros(self.config.costs.container_cold_launch) + self.launch_jitter();
        main.charge("container_cold_launch", launch);
        self.events
            .push(at, "scheduler", "docker_run", json!({"container": id}));
        let runtime = micros(self.config.costs.cold_runtime_init);
        let run = match self.run_init(id, dest, runtime, &main) {
            Ok(run) => run,
            Err(e) => {
                self.events.push(
                    main.now(),
                    "scheduler",
                    "cold_start_failed",
                    json!({"container": id, "error": e.to_string()}),
                );
                self.table.remove(id);
                if let Some(mut c) = self.containers.remove(&id) {
                    c.procs.kill_all();
                }
                return Err(e);
            }
        };
        self.finish_in_init(id, spec, dest, at, launch, run, main, StartKind::Cold)
    }

    fn warm_start(
        &mut self,
        id: ContainerId,
        spec: &RequestSpec,
        dest: Gid,
        at: Duration,
    ) -> Result<RequestOutcome, OrchestratorError> {
        let main = Timeline::with_mode(at, self.clock.mode(), false);
        let exec = micros(self.config.costs.container_warm_exec) + self.launch_jitter();
        main.charge("container_warm_exec", exec);
        self.events
            .push(at, "scheduler", "docker_exec", json!({"container": id}));
        let runtime = micros(self.config.costs.runtime_init);
        let run = self.run_init(id, dest, runtime, &main)?;
        self.finish_in_init(id, spec, dest, at, exec, run, main, StartKind::Warm)
    }

    /// Cold and warm starts run the handler inside the fresh INIT process.
    #[allow(clippy::too_many_arguments)]
    fn finish_in_init(
        &mut self,
        id: ContainerId,
        spec: &RequestSpec,
        dest: Gid,
        at: Duration,
        launch: Duration,
        run: InitRun,
        main: Timeline,
        kind: StartKind,
    ) -> Result<RequestOutcome, OrchestratorError> {
        let visible = run.rdma_setup.saturating_sub(run.runtime_init);
        let (rdma_setup, runtime_init, init_elapsed) =
            (run.rdma_setup, run.runtime_init, run.elapsed);
        let pid = run.init.pid;
        self.install_init(id, run, main.now(), kind);
        let handler_start = main.now();
        let (qp_ids, result) = self.invoke_in(id, pid, pid, spec, dest, &main, false)?;
        let dx = main.now() - handler_start;
        let finished = main.now();
        let timing = TimingBreakdown {
            task_launch: as_micros(launch + runtime_init),
            visible_control_plane: as_micros(visible),
            data_exchange: as_micros(dx),
            end_to_end: as_micros(finished - at),
            rdma_setup: as_micros(rdma_setup),
            runtime_init: as_micros(runtime_init),
            init_elapsed: as_micros(init_elapsed),
            queue_wait: 0.0,
        };
        Ok(RequestOutcome {
            start: kind,
            fell_back: false,
            container: id,
            pid,
            timing,
            result,
            qp_ids,
            arrived: at,
            finished,
        })
    }

    /// Assigns QPs in INIT `init_pid` to `pid`, runs the handler on
    /// `timeline` and schedules the release. Connecting any QP is charged to
    /// `timeline` as well.
    #[allow(clippy::too_many_arguments)]
    fn invoke_in(
        &mut self,
        id: ContainerId,
        init_pid: Pid,
        pid: Pid,
        spec: &RequestSpec,
        dest: Gid,
        timeline: &Timeline,
        exits: bool,
    ) -> Result<Invocation, OrchestratorError> {
        let handler = self
            .handlers
            .get(&spec.function)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownFunction(spec.function.clone()))?;
        let mut ctx = self.function_context(id, init_pid, pid, dest, timeline)?;
        let qp_ids = ctx.qp_ids.clone();
        let event = Event {
            user: spec.user.clone(),
            function: spec.function.clone(),
            payload: spec.payload.clone(),
        };
        let result = run_handler(&handler, &event, &mut ctx);
        self.events.push(
            timeline.now(),
            format!("pid-{pid}"),
            "handler",
            json!({"function": spec.function, "qps": qp_ids, "ok": result.is_ok()}),
        );
        let c = self.containers.get_mut(&id).expect("caller checked");
        let init = c.inits.get_mut(&init_pid).expect("caller checked");
        init.releases.push(Release {
            at: timeline.now(),
            pid,
            exits,
        });
        Ok((qp_ids, result))
    }

    /// Builds the handler's view: QPs assigned from the INIT pool (or the
    /// child's private ones) and the process's own memory region.
    fn function_context(
        &mut self,
        id: ContainerId,
        init_pid: Pid,
        pid: Pid,
        dest: Gid,
        timeline: &Timeline,
    ) -> Result<FunctionContext, OrchestratorError> {
        let kv = self.fabric.server_kv(dest).map(|m| (m.rkey(), m.len()));
        let c = self
            .containers
            .get_mut(&id)
            .ok_or(OrchestratorError::UnknownContainer(id))?;
        let proc_ = c.procs.get(pid).ok_or(ForkError::UnknownPid(pid))?.clone();
        let mut ctx = FunctionContext {
            pd: proc_.rdma.as_ref().map(|v| v.pd.clone()),
            mr: proc_.mrs.first().cloned(),
            qps: Vec::new(),
            qp_ids: Vec::new(),
            destination: dest,
            kv,
            timeline: timeline.clone(),
        };
        if let Some(p) = c.private.get(&pid) {
            ctx.qps = p.qps.clone();
            ctx.qp_ids = (0..p.qps.len()).collect();
        } else if self.scheme.uses_rdma() {
            let init = c
                .inits
                .get_mut(&init_pid)
                .ok_or(OrchestratorError::NoInit(id))?;
            if ctx.mr.is_none() {
                ctx.mr = init.rdma.as_ref().map(|r| r.mr.clone());
            }
            let ids = init.assign_qps(dest, QPS_PER_REQUEST, pid, timeline)?;
            ctx.qps = init.qps_of(&ids);
            ctx.qp_ids = ids;
        }
        if let Some(p) = c.procs.get_mut(pid) {
            p.assigned = ctx.qp_ids.clone();
        }
        Ok(ctx)
    }

    /// The INIT to fork: most unassigned QPs already connected to `dest`,
    /// then lowest pid.
    fn pick_init(&self, id: ContainerId, dest: Gid) -> Option<Pid> {
        let c = self.containers.get(&id)?;
        c.inits
            .values()
            .max_by(|a, b| {
                a.assignments()
                    .ready_for(dest)
                    .cmp(&b.assignments().ready_for(dest))
                    .then(b.pid.cmp(&a.pid))
            })
            .map(|i| i.pid)
    }

    fn fork_start(
        &mut self,
        id: ContainerId,
        spec: &RequestSpec,
        dest: Gid,
        at: Duration,
    ) -> Result<RequestOutcome, OrchestratorError> {
        let init_pid = self
            .pick_init(id, dest)
            .ok_or(OrchestratorError::NoInit(id))?;
        let costs = self.config.costs.clone();
        let mode = self.clock.mode();
        let c = self.containers.get_mut(&id).expect("picked above");
        let init = c.inits.get_mut(&init_pid).expect("picked above");
        let mut start = at.max(init.busy_until);

        // Queue until enough QPs are free, releasing children as they end.
        if self.scheme.uses_rdma() && !matches!(self.scheme, Scheme::Uncached) {
            loop {
                let c = self.containers.get_mut(&id).expect("picked above");
                let init = c.inits.get_mut(&init_pid).expect("picked above");
                if select(init.assignments().entries(), dest, QPS_PER_REQUEST).is_some() {
                    break;
                }
                init.replenish()?;
                if select(init.assignments().entries(), dest, QPS_PER_REQUEST).is_some() {
                    break;
                }
                let Some(next) = init.releases.iter().map(|r| r.at).min() else {
                    return Err(OrchestratorError::Exhausted { init: init_pid });
                };
                self.events.push(
                    start,
                    format!("init-{init_pid}"),
                    "exhausted",
                    json!({"wait_until_us": as_micros(next)}),
                );
                start = start.max(next);
                self.run_releases(id, |r| r.at <= next)?;
            }
        }

        let tl = Timeline::with_mode(start, mode, false);
        let c = self.containers.get_mut(&id).expect("picked above");
        let mut visible = Duration::ZERO;
        let pid = match self.scheme {
            Scheme::Swift | Scheme::KernelMediated => {
                // The INIT assigns (connecting if it must), then forks.
                let child = c.procs.next_pid();
                let init = c.inits.get_mut(&init_pid).expect("picked above");
                let ids = init.assign_qps(dest, QPS_PER_REQUEST, child, &tl)?;
                if self.scheme.kernel_mediated() {
                    tl.charge("kernel_connect", micros(costs.kernel_connect_cost));
                }
                visible = tl.now() - start;
                let forked = c.procs.fork_process(init_pid, &costs, &tl)?;
                debug_assert_eq!(forked, child);
                let init = c.inits.get_mut(&init_pid).expect("picked above");
                init.busy_until = tl.now();
                self.events.push(
                    tl.now(),
                    format!("init-{init_pid}"),
                    "fork",
                    json!({"child": child, "qps": ids, "connect_us": as_micros(visible)}),
                );
                if let Some(p) = c.procs.get_mut(child) {
                    p.assigned = ids;
                }
                child
            }
            Scheme::Uncached => {
                let child = c.procs.fork_process(init_pid, &costs, &tl)?;
                let init = c.inits.get_mut(&init_pid).expect("picked above");
                init.busy_until = tl.now();
                self.events.push(
                    tl.now(),
                    format!("init-{init_pid}"),
                    "fork",
                    json!({"child": child}),
                );
                // Without sharing, the child builds its own control plane.
                let t1 = tl.now();
                let tag = c.tag.clone();
                let (rdma, qps) = rdma_setup(
                    &self.worker,
                    self.worker.uncached_dispatch(),
                    dest,
                    1,
                    &tag,
                    &tl,
                )?;
                visible += tl.now() - t1;
                if let Some(p) = c.procs.get_mut(child) {
                    p.mrs.push(rdma.mr.clone());
                    p.rdma = Some(RdmaView {
                        ctx: rdma.ctx.clone(),
                        pd: rdma.pd.clone(),
                    });
                }
                c.private.insert(child, PrivateRdma { ctx: rdma.ctx, qps });
                child
            }
            Scheme::Baseline => {
                let child = c.procs.fork_process(init_pid, &costs, &tl)?;
                let init = c.inits.get_mut(&init_pid).expect("picked above");
                init.busy_until = tl.now();
                child
            }
        };

        let handler_start = tl.now();
        let (qp_ids, result) = self.invoke_child(id, init_pid, pid, spec, dest, &tl)?;
        let dx = tl.now() - handler_start;
        let finished = tl.now();
        let e2e = finished - at;
        let timing = TimingBreakdown {
            task_launch: as_micros(e2e - visible - dx),
            visible_control_plane: as_micros(visible),
            data_exchange: as_micros(dx),
            end_to_end: as_micros(e2e),
            rdma_setup: as_micros(visible),
            runtime_init: 0.0,
            init_elapsed: 0.0,
            queue_wait: as_micros(start - at),
        };
        let c = self.containers.get(&id).expect("picked above");
        let conns = c.inits[&init_pid].connections();
        self.table.set_connections(id, init_pid, conns);
        Ok(RequestOutcome {
            start: StartKind::Fork,
            fell_back: false,
            container: id,
            pid,
            timing,
            result,
            qp_ids,
            arrived: at,
            finished,
        })
    }

    /// Runs the handler in a forked child whose QPs are already assigned.
    fn invoke_child(
        &mut self,
        id: ContainerId,
        init_pid: Pid,
        pid: Pid,
        spec: &RequestSpec,
        dest: Gid,
        timeline: &Timeline,
    ) -> Result<Invocation, OrchestratorError> {
        let handler = self
            .handlers
            .get(&spec.function)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownFunction(spec.function.clone()))?;
        let kv = self.fabric.server_kv(dest).map(|m| (m.rkey(), m.len()));
        let c = self
            .containers
            .get_mut(&id)
            .ok_or(OrchestratorError::UnknownContainer(id))?;
        let proc_ = c.procs.get(pid).ok_or(ForkError::UnknownPid(pid))?.clone();
        let init = c
            .inits
            .get(&init_pid)
            .ok_or(OrchestratorError::NoInit(id))?;
        let (qps, qp_ids) = match c.private.get(&pid) {
            Some(p) => (p.qps.clone(), (0..p.qps.len()).collect()),
            None => (init.qps_of(&proc_.assigned), proc_.assigned.clone()),
        };
        let mut ctx = FunctionContext {
            pd: proc_.rdma.as_ref().map(|v| v.pd.clone()),
            mr: proc_.mrs.first().cloned().or_else(|| {
                // A kernel-mediated INIT holds no user-space region, so the
                // child gets a fresh one on the shared PD.
                let r = init.rdma.as_ref()?;
                Some(r.pd.register_copy(&r.mr))
            }),
            qps,
            qp_ids: qp_ids.clone(),
            destination: dest,
            kv,
            timeline: timeline.clone(),
        };
        let event = Event {
            user: spec.user.clone(),
            function: spec.function.clone(),
            payload: spec.payload.clone(),
        };
        let result = run_handler(&handler, &event, &mut ctx);
        self.events.push(
            timeline.now(),
            format!("pid-{pid}"),
            "handler",
            json!({"function": spec.function, "qps": qp_ids, "ok": result.is_ok()}),
        );
        if proc_.mrs.is_empty() {
            if let (Some(mr), Some(pd)) = (&ctx.mr, &ctx.pd) {
                pd.dereg_mr(mr);
            }
        }
        let c = self.containers.get_mut(&id).expect("checked above");
        let init = c.inits.get_mut(&init_pid).expect("checked above");
        init.releases.push(Release {
            at: timeline.now(),
            pid,
            exits: true,
        });
        Ok((qp_ids, result))
    }

    /// Closes every QP of the container at once, kills its processes and
    /// forgets it. Returns how many QPs were closed.
    pub fn terminate_container(&mut self, id: ContainerId) -> Result<usize, OrchestratorError> {
        let mut c = self
            .containers
            .remove(&id)
            .ok_or(OrchestratorError::UnknownContainer(id))?;
        let mut closed = 0;
        for init in c.inits.values_mut() {
            closed += init.shutdown()?;
        }
        for p in c.private.values() {
            for qp in &p.qps {
                qp.close();
                closed += 1;
            }
            p.ctx.close();
        }
        c.procs.kill_all();
        // Anything created under the container's tag that escaped the tables.
        closed += sweep_tag(&self.fabric, &c.tag);
        self.table.remove(id);
        self.events.push(
            self.clock.now(),
            "scheduler",
            "terminate",
            json!({"container": id, "closed": closed}),
        );
        Ok(closed)
    }

    /// Violated invariants, empty if all hold.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (id, c) in &self.containers {
            if self.table.get(*id).is_none() {
                bad.push(format!("container {id} missing from the table"));
            }
            let users = self.served.get(id).map_or(0, BTreeSet::len);
            if users > 1 {
                bad.push(format!("container {id} served {users} users"));
            }
            if let Some(r) = self.table.get(*id) {
                if r.user != c.user || r.function != c.function {
                    bad.push(format!("container {id} record does not match"));
                }
            }
            let mut holders: BTreeMap<(Pid, usize), Pid> = BTreeMap::new();
            for init in c.inits.values() {
                if init.qp_table().len() != init.assignments().len() {
                    bad.push(format!("INIT {} tables differ in length", init.pid));
                }
                if init.qp_table().owner() != init.writer()
                    || init.assignments().owner() != init.writer()
                {
                    bad.push(format!("INIT {} tables owned by another writer", init.pid));
                }
                for (i, e) in init.assignments().entries().iter().enumerate() {
                    if let Some(pid) = e.pid {
                        if !c.procs.is_alive(pid) {
                            bad.push(format!(
                                "QP {i} of INIT {} held by dead pid {pid}",
                                init.pid
                            ));
                        }
                        if let Some(other) = holders.insert((init.pid, i), pid) {
                            bad.push(format!("QP {i} held by {other} and {pid}"));
                        }
                    }
                    if e.destination.is_some() {
                        let state = init.qp_table().get(i).map(QueuePair::state);
                        if state != Some(QpState::Rts) {
                            bad.push(format!(
                                "QP {i} of INIT {} has a destination but is {state:?}",
                                init.pid
                            ));
                        }
                    }
                }
            }
            // A pid may hold QPs of only one INIT.
            let mut seen: BTreeMap<Pid, Pid> = BTreeMap::new();
            for ((init, _), pid) in holders {
                if let Some(prev) = seen.insert(pid, init) {
                    if prev != init {
                        bad.push(format!("pid {pid} holds QPs of INITs {prev} and {init}"));
                    }
                }
            }
        }
        for (id, _) in self.table.iter() {
            if !self.containers.contains_key(id) {
                bad.push(format!("table lists dead container {id}"));
            }
        }
        bad
    }
}

fn run_handler(
    handler: &HandlerFn,
    event: &Event,
    ctx: &mut FunctionContext,
) -> Result<Vec<u8>, String> {
    match catch_unwind(AssertUnwindSafe(|| handler(event, ctx))) {
        Ok(r) => r,
        Err(panic) => Err(match panic.downcast_ref::<&str>() {
            Some(s) => format!("handler panicked: {s}"),
            None => match panic.downcast_ref::<String>() {
                Some(s) => format!("handler panicked: {s}"),
                None => "handler panicked".to_owned(),
            },
        }),
    }
}

/// Closes every live QP tagged `tag`.
fn sweep_tag(fabric: &Fabric, tag: &str) -> usize {
    let qps = fabric.qps_tagged(tag);
    for qp in &qps {
        qp.close();
    }
    qps.len()
}
