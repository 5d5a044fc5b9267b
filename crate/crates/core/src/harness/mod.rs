//! Benchmark drivers, the requirement check and result export.
//!
//! Every benchmark yields a [`BenchResult`]: raw rows (one per run, or per
//! run and client thread) followed by a single aggregate row that can be
//! recomputed from the raw ones.

mod check;
mod control;
mod data;
mod export;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::ConfigError;
use crate::orchestrator::{OrchestratorError, ScenarioConfig};
use crate::verbs::VerbsError;

pub use check::{requirement_check, CheckReport, RuleOutcome, FORK_LIMIT_US, OVERHEAD_LIMIT};
pub use control::bench_control_plane;
pub use data::{
    bench_data_plane, run_data_plane, DataOp, DataPlaneParams, DataPlaneRun, Mode, ThreadStats,
};
pub use export::{from_csv, read_results, to_csv, write_results, Format};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("repeats must be >= 1")]
    ZeroRepeats,
    #[error("{threads} threads exceed the QP pool of {pool}")]
    PoolExhausted { threads: usize, pool: usize },
    #[error("threads must be >= 1")]
    ZeroThreads,
    #[error("duration must be > 0")]
    ZeroDuration,
    #[error("scenario mismatch: {0}")]
    Scenario(String),
    #[error("missing results for {0}")]
    MissingScenario(String),
    #[error("nothing to export")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed results: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Raw,
    Aggregate,
}

/// One CSV line. Control-plane rows fill the timing columns, data-plane
/// rows the throughput and latency columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub scheme: String,
    pub seed: u64,
    pub kind: RowKind,
    pub run: Option<u32>,
    pub thread: Option<u32>,
    pub task_launch_us: Option<f64>,
    pub visible_control_plane_us: Option<f64>,
    pub data_exchange_us: Option<f64>,
    pub end_to_end_us: Option<f64>,
    pub ops: Option<u64>,
    pub throughput_ops_s: Option<f64>,
    pub mean_latency_us: Option<f64>,
    pub p99_latency_us: Option<f64>,
}

impl Row {
    fn empty(scenario: &str, scheme: &str, seed: u64, kind: RowKind) -> Self {
        Self {
            scenario: scenario.to_owned(),
            scheme: scheme.to_owned(),
            seed,
            kind,
            run: None,
            thread: None,
            task_launch_us: None,
            visible_control_plane_us: None,
            data_exchange_us: None,
            end_to_end_us: None,
            ops: None,
            throughput_ops_s: None,
            mean_latency_us: None,
            p99_latency_us: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: String,
    pub scheme: String,
    pub seed: u64,
    /// Hex sha256 of the scenario config as TOML.
    pub config_hash: String,
    pub repeats: u32,
    pub rows: Vec<Row>,
}

impl BenchResult {
    pub fn raw(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.kind == RowKind::Raw)
    }

    pub fn aggregate(&self) -> Option<&Row> {
        self.rows.iter().find(|r| r.kind == RowKind::Aggregate)
    }
}

pub fn config_hash(config: &ScenarioConfig) -> String {
    hex::encode(Sha256::digest(config.to_toml_string().as_bytes()))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Recomputes the aggregate row of `rows` from their raw rows.
pub fn aggregate(rows: &[Row]) -> Option<Row> {
    let raw: Vec<&Row> = rows.iter().filter(|r| r.kind == RowKind::Raw).collect();
    let first = raw.first()?;
    let mut agg = Row::empty(
        &first.scenario,
        &first.scheme,
        first.seed,
        RowKind::Aggregate,
    );
    let avg = |f: fn(&Row) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = raw.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| mean(vals))
    };
    agg.task_launch_us = avg(|r| r.task_launch_us);
    agg.visible_control_plane_us = avg(|r| r.visible_control_plane_us);
    agg.data_exchange_us = avg(|r| r.data_exchange_us);
    agg.end_to_end_us = avg(|r| r.end_to_end_us);
    if raw.iter().any(|r| r.ops.is_some()) {
        let runs = raw
            .iter()
            .filter_map(|r| r.run)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            .max(1) as f64;
        let ops: u64 = raw.iter().filter_map(|r| r.ops).sum();
        agg.ops = Some(ops);
        // Total throughput of all threads, averaged over runs.
        agg.throughput_ops_s =
            Some(raw.iter().filter_map(|r| r.throughput_ops_s).sum::<f64>() / runs);
        let weighted: f64 = raw
            .iter()
            .filter_map(|r| Some(r.mean_latency_us? * r.ops? as f64))
            .sum();
        agg.mean_latency_us = Some(if ops == 0 { 0.0 } else { weighted / ops as f64 });
        agg.p99_latency_us = avg(|r| r.p99_latency_us);
    }
    Some(agg)
}
