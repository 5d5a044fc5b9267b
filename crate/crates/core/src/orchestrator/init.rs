use std::sync::Arc;
use std::time::Duration;

use crate::cache::CacheDispatch;
use crate::clock::Timeline;
use crate::fork::Pid;
use crate::verbs::{
    AccessFlags, CompletionQueue, DeviceContext, Fabric, Gid, Host, MemoryRegion, ProtectionDomain,
    QpState, QueuePair, VerbsError, FUNCTION_MR_BYTES,
};

use super::config::PoolConfig;
use super::tables::{
    select, Assignment, AssignmentTable, ContainerId, QpTable, TableError, WriterId,
};
use super::OrchestratorError;

const CQ_DEPTH: usize = 4096;

/// Control-plane resources created by an INIT process.
#[derive(Debug, Clone)]
pub struct InitRdma {
    pub ctx: DeviceContext,
    pub pd: ProtectionDomain,
    pub mr: MemoryRegion,
    pub cq: CompletionQueue,
}

/// Connects `qp` to a fresh server-side QP at `dest`, charging `timeline`.
pub(crate) fn connect_to(
    fabric: &Fabric,
    qp: &QueuePair,
    dest: Gid,
    timeline: &Timeline,
) -> Result<(), VerbsError> {
    if qp.state() != QpState::Reset {
        qp.reset();
    }
    let info = fabric.accept(dest, qp.endpoint())?;
    qp.bind_timeline(timeline.clone());
    qp.connect(info.endpoint)
}

/// The RDMA track of an INIT: device, PD, the function MR, one CQ and `n`
/// QPs connected to `dest`.
pub(crate) fn rdma_setup(
    host: &Arc<Host>,
    dispatch: Arc<CacheDispatch>,
    dest: Gid,
    n: usize,
    tag: &str,
    timeline: &Timeline,
) -> Result<(InitRdma, Vec<QueuePair>), VerbsError> {
    let devices = host.get_device_list(&dispatch, timeline)?;
    let dev = *devices
        .first()
        .ok_or(VerbsError::UnknownDevice(crate::verbs::DeviceId {
            host: host.id(),
            index: 0,
        }))?;
    let ctx = host.open_device(dev, dispatch, timeline)?;
    ctx.set_tag(tag);
    let pd = ctx.alloc_pd()?;
    let mr = pd.reg_mr(FUNCTION_MR_BYTES, AccessFlags::ALL)?;
    let cq = ctx.create_cq(CQ_DEPTH)?;
    let qps = (0..n)
        .map(|_| pd.create_qp(&cq))
        .collect::<Result<Vec<_>, _>>()?;
    let fabric = ctx.fabric().clone();
    for qp in &qps {
        connect_to(&fabric, qp, dest, timeline)?;
    }
    Ok((InitRdma { ctx, pd, mr, cq }, qps))
}

/// A pending release: at `at`, `pid` gives its QPs back; `exits` says
/// whether the process ends too.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Release {
    pub at: Duration,
    pub pid: Pid,
    pub exits: bool,
}

/// An INIT process: owner of its container's QP pool.
#[derive(Debug)]
pub struct InitProcess {
    pub pid: Pid,
    pub container: ContainerId,
    writer: WriterId,
    pub(crate) rdma: Option<InitRdma>,
    qps: QpTable,
    assignments: AssignmentTable,
    pool: PoolConfig,
    /// Replenishment runs here, off every request's critical path.
    background: Timeline,
    /// The listener is busy forking until this instant.
    pub(crate) busy_until: Duration,
    pub(crate) releases: Vec<Release>,
    pub(crate) replenished: usize,
}

impl InitProcess {
    pub(crate) fn new(
        pid: Pid,
        container: ContainerId,
        rdma: Option<InitRdma>,
        initial: Vec<QueuePair>,
        dest: Gid,
        pool: PoolConfig,
        started: Duration,
    ) -> Result<Self, TableError> {
        let writer = writer_id(container, pid);
        let mut init = Self {
            pid,
            container,
            writer,
            rdma,
            qps: QpTable::new(writer),
            assignments: AssignmentTable::new(writer),
            pool,
            background: Timeline::starting_at(started),
            busy_until: started,
            releases: Vec::new(),
            replenished: 0,
        };
        for qp in initial {
            let destination = (qp.state() == QpState::Rts).then_some(dest);
            init.qps.push(writer, qp)?;
            init.assignments.push(
                writer,
                Assignment {
                    pid: None,
                    destination,
                },
            )?;
        }
        Ok(init)
    }

    pub fn writer(&self) -> WriterId {
        self.writer
    }

    pub fn qp_table(&self) -> &QpTable {
        &self.qps
    }

    pub fn assignments(&self) -> &AssignmentTable {
        &self.assignments
    }

    pub fn background(&self) -> &Timeline {
        &self.background
    }

    /// (QP id, destination) of every connected QP.
    pub fn connections(&self) -> Vec<(usize, Gid)> {
        self.assignments
            .entries()
            .iter()
            .enumerate()
            .filter_map(|(i, e)| Some((i, e.destination?)))
            .collect()
    }

    /// Assigns `count` QPs to `pid` for `dest`, connecting any that are not
    /// connected there yet. Connection work is charged to `timeline`.
    pub(crate) fn assign_qps(
        &mut self,
        dest: Gid,
        count: usize,
        pid: Pid,
        timeline: &Timeline,
    ) -> Result<Vec<usize>, OrchestratorError> {
        let picked = match select(self.assignments.entries(), dest, count) {
            Some(p) => p,
            None => {
                self.replenish()?;
                select(self.assignments.entries(), dest, count)
                    .ok_or(OrchestratorError::Exhausted { init: self.pid })?
            }
        };
        let rdma = self.rdma.as_ref().ok_or(OrchestratorError::NoRdma)?;
        let fabric = rdma.ctx.fabric().clone();
        for &id in &picked {
            let entry = self.assignments.entries()[id];
            let qp = self.qps.get(id).expect("tables are parallel").clone();
            if entry.destination != Some(dest) || qp.state() != QpState::Rts {
                connect_to(&fabric, &qp, dest, timeline)?;
            }
            self.assignments.set(
                self.writer,
                id,
                Assignment {
                    pid: Some(pid),
                    destination: Some(dest),
                },
            )?;
        }
        self.replenish()?;
        Ok(picked)
    }

    /// Tops the pool up to the threshold in batches, up to the cap.
    pub(crate) fn replenish(&mut self) -> Result<usize, OrchestratorError> {
        let Some(rdma) = self.rdma.clone() else {
            return Ok(0);
        };
        let pd = rdma.pd.with_timeline(self.background.clone());
        let mut created = 0;
        while self.assignments.unassigned() < self.pool.threshold
            && self.qps.len() < self.pool.max_qps
        {
            let n = self
                .pool
                .batch
                .max(1)
                .min(self.pool.max_qps - self.qps.len());
            for _ in 0..n {
                let qp = pd.create_qp(&rdma.cq)?;
                self.qps.push(self.writer, qp)?;
                self.assignments.push(self.writer, Assignment::default())?;
                created += 1;
            }
        }
        self.replenished += created;
        Ok(created)
    }

    pub(crate) fn release_qps(&mut self, pid: Pid) -> Result<Vec<usize>, TableError> {
        self.assignments.release(self.writer, pid)
    }

    pub(crate) fn qps_of(&self, ids: &[usize]) -> Vec<QueuePair> {
        ids.iter()
            .filter_map(|id| self.qps.get(*id).cloned())
            .collect()
    }

    /// Closes every QP and empties both tables. Returns how many QPs were
    /// closed.
    pub(crate) fn shutdown(&mut self) -> Result<usize, TableError> {
        let qps = self.qps.drain(self.writer)?;
        self.assignments.clear(self.writer)?;
        for qp in &qps {
            qp.close();
        }
        if let Some(rdma) = &self.rdma {
            rdma.ctx.close();
        }
        self.releases.clear();
        Ok(qps.len())
    }
}

pub fn writer_id(container: ContainerId, pid: Pid) -> WriterId {
    (container << 32) | pid as u64
}
