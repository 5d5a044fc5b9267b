//! Logical processes and copy-on-fork.
//!
//! A fork shares the parent's device context and protection domain by
//! reference and deep-copies every registered memory region, so traffic
//! landing in the child's buffers can never touch the parent's.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timeline;
use crate::cost::CostModel;
use crate::verbs::{DeviceContext, MemoryRegion, ProtectionDomain};

pub type Pid = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForkError {
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("process {0} has already exited")]
    Exited(Pid),
    #[error("process {pid} still has {children} live children")]
    LiveChildren { pid: Pid, children: usize },
}

/// Control-plane handles a process can see.
#[derive(Debug, Clone)]
pub struct RdmaView {
    pub ctx: DeviceContext,
    pub pd: ProtectionDomain,
}

#[derive(Debug, Clone)]
pub struct LogicalProcess {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub rdma: Option<RdmaView>,
    /// Regions owned by this process. For a child these are private copies.
    pub mrs: Vec<MemoryRegion>,
    /// Established QPs this process holds directly (an INIT's pool).
    pub qps_held: usize,
    /// QP ids handed to this process by its INIT.
    pub assigned: Vec<usize>,
    pub alive: bool,
}

impl LogicalProcess {
    fn holds_rdma(&self) -> bool {
        !self.mrs.is_empty() || self.qps_held > 0
    }

    pub fn mr_bytes(&self) -> usize {
        self.mrs.iter().map(MemoryRegion::len).sum()
    }
}

/// Cost of one fork, split as charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForkCost {
    pub base: Duration,
    pub surcharge: Duration,
}

impl ForkCost {
    pub fn total(&self) -> Duration {
        self.base + self.surcharge
    }
}

/// All processes of one container.
#[derive(Debug, Default)]
pub struct ProcessTable {
    procs: BTreeMap<Pid, LogicalProcess>,
    next_pid: Pid,
}

impl ProcessTable {
    /// Pids start at `first_pid`, so tables of different containers never
    /// hand out the same pid.
    pub fn new(first_pid: Pid) -> Self {
        Self {
            procs: BTreeMap::new(),
            next_pid: first_pid,
        }
    }

    /// A new root process.
    pub fn spawn(&mut self, rdma: Option<RdmaView>) -> Pid {
        let pid = self.next_pid;
        self.next_pid += 1;
        self.procs.insert(
            pid,
            LogicalProcess {
                pid,
                parent: None,
                rdma,
                mrs: Vec::new(),
                qps_held: 0,
                assigned: Vec::new(),
                alive: true,
            },
        );
        pid
    }

    /// The pid the next spawn or fork will receive.
    pub fn next_pid(&self) -> Pid {
        self.next_pid
    }

    pub fn get(&self, pid: Pid) -> Option<&LogicalProcess> {
        self.procs.get(&pid)
    }

    pub fn get_mut(&mut self, pid: Pid) -> Option<&mut LogicalProcess> {
        self.procs.get_mut(&pid)
    }

    pub fn is_alive(&self, pid: Pid) -> bool {
        self.procs.get(&pid).is_some_and(|p| p.alive)
    }

    pub fn live_children(&self, pid: Pid) -> usize {
        self.procs
            .values()
            .filter(|p| p.parent == Some(pid) && p.alive)
            .count()
    }

    pub fn live(&self) -> impl Iterator<Item = &LogicalProcess> {
        self.procs.values().filter(|p| p.alive)
    }

    pub fn len(&self) -> usize {
        self.procs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.procs.is_empty()
    }

    /// What forking `pid` would cost right now.
    pub fn fork_cost(&self, pid: Pid, costs: &CostModel) -> Result<ForkCost, ForkError> {
        let p = self.live_process(pid)?;
        let surcharge = if p.holds_rdma() {
            costs.fork_surcharge(p.mr_bytes())
        } else {
            Duration::ZERO
        };
        Ok(ForkCost {
            base: crate::clock::micros(costs.fork_base),
            surcharge,
        })
    }

    fn live_process(&self, pid: Pid) -> Result<&LogicalProcess, ForkError> {
        let p = self.procs.get(&pid).ok_or(ForkError::UnknownPid(pid))?;
        if !p.alive {
            return Err(ForkError::Exited(pid));
        }
        Ok(p)
    }

    /// Forks `parent`: handles are shared, regions are copied. The charge
    /// lands on `timeline`.
    pub fn fork_process(
        &mut self,
        parent: Pid,
        costs: &CostModel,
        timeline: &Timeline,
    ) -> Result<Pid, ForkError> {
        let cost = self.fork_cost(parent, costs)?;
        let p = self.live_process(parent)?;
        let rdma = p.rdma.clone();
        let mrs = match &rdma {
            Some(view) => p.mrs.iter().map(|mr| view.pd.register_copy(mr)).collect(),
            None => Vec::new(),
        };
        timeline.charge("fork", cost.base);
        if cost.surcharge > Duration::ZERO {
            timeline.charge("copy_on_fork", cost.surcharge);
        }
        let pid = self.next_pid;
        self.next_pid += 1;
        self.procs.insert(
            pid,
            LogicalProcess {
                pid,
                parent: Some(parent),
                rdma,
                mrs,
                qps_held: 0,
                assigned: Vec::new(),
                alive: true,
            },
        );
        Ok(pid)
    }

    /// Ends `pid` and drops its private regions. A process with live
    /// children cannot exit; its container must be terminated instead.
    pub fn exit_process(&mut self, pid: Pid) -> Result<(), ForkError> {
        self.live_process(pid)?;
        let children = self.live_children(pid);
        if children > 0 {
            return Err(ForkError::LiveChildren { pid, children });
        }
        let p = self.procs.get_mut(&pid).expect("checked above");
        p.alive = false;
        p.assigned.clear();
        if let Some(view) = &p.rdma {
            for mr in p.mrs.drain(..) {
                view.pd.dereg_mr(&mr);
            }
        }
        Ok(())
    }

    /// Marks every process dead, regardless of children.
    pub fn kill_all(&mut self) -> Vec<Pid> {
        let mut killed = Vec::new();
        for p in self.procs.values_mut().filter(|p| p.alive) {
            p.alive = false;
            p.assigned.clear();
            if let Some(view) = &p.rdma {
                for mr in p.mrs.drain(..) {
                    view.pd.dereg_mr(&mr);
                }
            }
            killed.push(p.pid);
        }
        killed
    }
}
