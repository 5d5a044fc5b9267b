use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{as_micros, ClockMode, Timeline};
use crate::orchestrator::{ScenarioConfig, Scheme};
use crate::verbs::{
    AccessFlags, Fabric, Host, HostConfig, Opcode, QueuePair, RemoteAddr, ServerConfig,
    WorkRequest, FUNCTION_MR_BYTES,
};

use super::{aggregate, config_hash, BenchResult, HarnessError, Row, RowKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataOp {
    Read,
    Write,
    SendRecv,
}

impl DataOp {
    pub const ALL: [DataOp; 3] = [DataOp::Read, DataOp::Write, DataOp::SendRecv];

    pub fn name(self) -> &'static str {
        match self {
            DataOp::Read => "read",
            DataOp::Write => "write",
            DataOp::SendRecv => "send-recv",
        }
    }
}

impl fmt::Display for DataOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "read" => Ok(DataOp::Read),
            "write" => Ok(DataOp::Write),
            "send-recv" | "send_recv" | "sendrecv" => Ok(DataOp::SendRecv),
            other => Err(format!("unknown op `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One outstanding request per client.
    Sync,
    /// Requests posted in batches.
    Async,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Sync, Mode::Async];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPlaneParams {
    pub op: DataOp,
    pub mode: Mode,
    pub threads: usize,
    pub duration: Duration,
    /// Requests per batch in async mode.
    pub batch: usize,
    /// Bytes per request.
    pub size: usize,
    pub clock: ClockMode,
}

impl Default for DataPlaneParams {
    fn default() -> Self {
        Self {
            op: DataOp::Read,
            mode: Mode::Sync,
            threads: 1,
            duration: Duration::from_secs(1),
            batch: 16,
            size: 64,
            clock: ClockMode::Virtual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreadStats {
    pub ops: u64,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
}

/// One data-plane run. The fabric is kept for audits of its log.
#[derive(Debug)]
pub struct DataPlaneRun {
    pub threads: Vec<ThreadStats>,
    pub fabric: Fabric,
    /// Gid of the client device, the source of every request.
    pub client_gid: crate::verbs::Gid,
    pub duration: Duration,
}

struct Client {
    qp: QueuePair,
    mr: crate::verbs::MemoryRegion,
    kv_rkey: u32,
}

const MAX_BATCH: usize = 64;

fn validate(
    config: &ScenarioConfig,
    scheme: Scheme,
    p: &DataPlaneParams,
) -> Result<(), HarnessError> {
    if !scheme.uses_rdma() {
        return Err(HarnessError::Scenario(format!(
            "{scheme} has no data plane"
        )));
    }
    if p.threads == 0 {
        return Err(HarnessError::ZeroThreads);
    }
    if p.threads > config.pool.max_qps {
        return Err(HarnessError::PoolExhausted {
            threads: p.threads,
            pool: config.pool.max_qps,
        });
    }
    if p.duration.is_zero() {
        return Err(HarnessError::ZeroDuration);
    }
    if p.batch == 0 || p.batch > MAX_BATCH {
        return Err(HarnessError::Scenario(format!(
            "batch must be in 1..={MAX_BATCH}"
        )));
    }
    if p.size == 0 || p.size > FUNCTION_MR_BYTES / 2 {
        return Err(HarnessError::Scenario(format!(
            "size must be in 1..={}",
            FUNCTION_MR_BYTES / 2
        )));
    }
    Ok(())
}

fn connect_clients(
    fabric: &Fabric,
    client: &Arc<Host>,
    server: &Arc<Host>,
    p: &DataPlaneParams,
) -> Result<Vec<Client>, HarnessError> {
    let gid = fabric.serve(
        server,
        ServerConfig {
            prepost: p.batch.max(16),
            echo: p.op == DataOp::SendRecv,
            ..ServerConfig::default()
        },
    )?;
    // Setup is not measured.
    let setup = Timeline::starting_at(Duration::ZERO);
    let ctx = client.open_device(client.devices()[0], client.cached_dispatch(), &setup)?;
    let pd = ctx.alloc_pd()?;
    (0..p.threads)
        .map(|_| {
            let cq = ctx.create_cq(4 * MAX_BATCH)?;
            let qp = pd.create_qp(&cq)?;
            let mr = pd.reg_mr(FUNCTION_MR_BYTES, AccessFlags::ALL)?;
            let info = fabric.accept(gid, qp.endpoint())?;
            qp.connect(info.endpoint)?;
            Ok(Client {
                qp,
                mr,
                kv_rkey: info.kv_rkey,
            })
        })
        .collect()
}

/// Runs one client until `p.duration` of its own time has passed.
fn drive(c: &Client, p: &DataPlaneParams) -> Result<ThreadStats, String> {
    let tl = Timeline::with_mode(Duration::ZERO, p.clock, false);
    c.qp.bind_timeline(tl.clone());
    let half = FUNCTION_MR_BYTES / 2;
    let per_round = match p.mode {
        Mode::Sync => 1,
        Mode::Async => p.batch,
    };
    let remote = RemoteAddr {
        rkey: c.kv_rkey,
        offset: 0,
    };
    let done_opcode = match p.op {
        DataOp::SendRecv => Opcode::Recv,
        DataOp::Read => Opcode::RdmaRead,
        DataOp::Write => Opcode::RdmaWrite,
    };
    let mut latencies: Vec<Duration> = Vec::new();
    let mut next = 0u64;
    let err = |e: crate::verbs::VerbsError| e.to_string();
    while tl.now() < p.duration {
        let mut posted: BTreeMap<u64, Duration> = BTreeMap::new();
        for _ in 0..per_round {
            if tl.now() >= p.duration {
                break;
            }
            let id = next;
            next += 1;
            let t0 = tl.now();
            match p.op {
                DataOp::SendRecv => {
                    c.qp.post_recv(&WorkRequest::recv(id, c.mr.sge(half, p.size)))
                        .map_err(err)?;
                    c.qp.post_send(&WorkRequest::send(id, c.mr.sge(0, p.size)))
                        .map_err(err)?;
                }
                DataOp::Read => {
                    c.qp.post_send(&WorkRequest::read(id, c.mr.sge(0, p.size), remote))
                        .map_err(err)?;
                }
                DataOp::Write => {
                    c.qp.post_send(&WorkRequest::write(id, c.mr.sge(0, p.size), remote))
                        .map_err(err)?;
                }
            }
            posted.insert(id, t0);
        }
        let mut latest = tl.now();
        while !posted.is_empty() {
            let wcs = c.qp.send_cq().poll(4 * MAX_BATCH);
            if wcs.is_empty() {
                return Err(format!("{} requests never completed", posted.len()));
            }
            for wc in wcs {
                if !wc.is_ok() {
                    return Err(format!("wr {} failed: {:?}", wc.wr_id, wc.status));
                }
                if wc.opcode != done_opcode {
                    continue;
                }
                if let Some(t0) = posted.remove(&wc.wr_id) {
                    latencies.push(wc.completed_at - t0);
                    latest = latest.max(wc.completed_at);
                }
            }
        }
        tl.advance_to(latest);
    }
    Ok(stats(&mut latencies))
}

fn stats(latencies: &mut [Duration]) -> ThreadStats {
    let ops = latencies.len() as u64;
    if latencies.is_empty() {
        return ThreadStats {
            ops,
            mean_latency_us: 0.0,
            p99_latency_us: 0.0,
        };
    }
    latencies.sort_unstable();
    let total: Duration = latencies.iter().sum();
    let rank = ((latencies.len() as f64) * 0.99).ceil() as usize;
    ThreadStats {
        ops,
        mean_latency_us: as_micros(total) / ops as f64,
        p99_latency_us: as_micros(latencies[rank.max(1) - 1]),
    }
}

/// One run: a client host with one connected QP per thread and an echoing
/// server. Each thread runs on its own OS thread and its own timeline.
pub fn run_data_plane(
    config: &ScenarioConfig,
    scheme: Scheme,
    params: &DataPlaneParams,
    seed: u64,
) -> Result<DataPlaneRun, HarnessError> {
    validate(config, scheme, params)?;
    let fabric = Fabric::new(seed);
    let client = fabric.add_host(HostConfig {
        name: "client".into(),
        kernel_mediated: scheme.kernel_mediated(),
        seed,
        ..HostConfig::with_costs(config.costs.clone())
    });
    let server = fabric.add_host(HostConfig {
        name: "server".into(),
        seed: seed.wrapping_add(1),
        ..HostConfig::with_costs(config.costs.clone())
    });
    let clients = connect_clients(&fabric, &client, &server, params)?;
    fabric.enable_log();
    let results: Vec<Result<ThreadStats, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter()
            .map(|c| s.spawn(move || drive(c, params)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err("client thread panicked".into()))
            })
            .collect()
    });
    let threads = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(HarnessError::Scenario)?;
    Ok(DataPlaneRun {
        threads,
        fabric,
        client_gid: client.gid(0),
        duration: params.duration,
    })
}

/// `repeats` runs, seeded `seed + run`, one raw row per run and thread.
pub fn bench_data_plane(
    config: &ScenarioConfig,
    scheme: Scheme,
    params: &DataPlaneParams,
    repeats: u32,
    seed: u64,
) -> Result<BenchResult, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::ZeroRepeats);
    }
    let scenario = format!(
        "data-plane/{}/{}/t{}",
        params.op, params.mode, params.threads
    );
    let secs = params.duration.as_secs_f64();
    let mut rows = Vec::new();
    for run in 0..repeats {
        let r = run_data_plane(config, scheme, params, seed.wrapping_add(run as u64))?;
        for (i, t) in r.threads.iter().enumerate() {
            rows.push(Row {
                run: Some(run),
                thread: Some(i as u32),
                ops: Some(t.ops),
                throughput_ops_s: Some(t.ops as f64 / secs),
                mean_latency_us: Some(t.mean_latency_us),
                p99_latency_us: Some(t.p99_latency_us),
                ..Row::empty(&scenario, scheme.name(), seed, RowKind::Raw)
            });
        }
    }
    rows.extend(aggregate(&rows));
    Ok(BenchResult {
        scenario,
        scheme: scheme.name().to_owned(),
        seed,
        config_hash: config_hash(config),
        repeats,
        rows,
    })
}
