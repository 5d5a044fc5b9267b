use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fork::Pid;
use crate::verbs::{Gid, QueuePair};

/// Identity of the actor allowed to mutate a table.
pub type WriterId = u64;

pub type ContainerId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("writer {writer} may not mutate a table owned by {owner}")]
    NotOwner { owner: WriterId, writer: WriterId },
    #[error("no QP with id {0}")]
    UnknownQp(usize),
}

/// Pointers to an INIT's QPs; the index is the QP id.
#[derive(Debug)]
pub struct QpTable {
    owner: WriterId,
    qps: Vec<QueuePair>,
}

impl QpTable {
    pub fn new(owner: WriterId) -> Self {
        Self {
            owner,
            qps: Vec::new(),
        }
    }

    pub fn owner(&self) -> WriterId {
        self.owner
    }

    fn check(&self, writer: WriterId) -> Result<(), TableError> {
        if writer != self.owner {
            return Err(TableError::NotOwner {
                owner: self.owner,
                writer,
            });
        }
        Ok(())
    }

    /// Appends `qp` and returns its id.
    pub fn push(&mut self, writer: WriterId, qp: QueuePair) -> Result<usize, TableError> {
        self.check(writer)?;
        self.qps.push(qp);
        Ok(self.qps.len() - 1)
    }

    pub fn get(&self, id: usize) -> Option<&QueuePair> {
        self.qps.get(id)
    }

    pub fn len(&self) -> usize {
        self.qps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuePair> {
        self.qps.iter()
    }

    /// Empties the table, returning every QP.
    pub fn drain(&mut self, writer: WriterId) -> Result<Vec<QueuePair>, TableError> {
        self.check(writer)?;
        Ok(std::mem::take(&mut self.qps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pid: Option<Pid>,
    /// Where the QP is connected, once it reached RTS.
    pub destination: Option<Gid>,
}

/// Per-QP assignment state, indexed by QP id.
#[derive(Debug, Clone)]
pub struct AssignmentTable {
    owner: WriterId,
    entries: Vec<Assignment>,
}

impl AssignmentTable {
    pub fn new(owner: WriterId) -> Self {
        Self {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn from_entries(owner: WriterId, entries: Vec<Assignment>) -> Self {
        Self { owner, entries }
    }

    pub fn owner(&self) -> WriterId {
        self.owner
    }

    fn check(&self, writer: WriterId) -> Result<(), TableError> {
        if writer != self.owner {
            return Err(TableError::NotOwner {
                owner: self.owner,
                writer,
            });
        }
        Ok(())
    }

    pub fn entries(&self) -> &[Assignment] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unassigned(&self) -> usize {
        self.entries.iter().filter(|e| e.pid.is_none()).count()
    }

    /// Unassigned entries already connected to `dest`.
    pub fn ready_for(&self, dest: Gid) -> usize {
        self.entries
            .iter()
            .filter(|e| e.pid.is_none() && e.destination == Some(dest))
            .count()
    }

    pub fn push(&mut self, writer: WriterId, entry: Assignment) -> Result<usize, TableError> {
        self.check(writer)?;
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn set(
        &mut self,
        writer: WriterId,
        id: usize,
        entry: Assignment,
    ) -> Result<(), TableError> {
        self.check(writer)?;
        let slot = self.entries.get_mut(id).ok_or(TableError::UnknownQp(id))?;
        *slot = entry;
        Ok(())
    }

    /// Clears the pid of every entry held by `pid`; destinations stay.
    /// Returns the ids released.
    pub fn release(&mut self, writer: WriterId, pid: Pid) -> Result<Vec<usize>, TableError> {
        self.check(writer)?;
        let mut ids = Vec::new();
        for (i, e) in self.entries.iter_mut().enumerate() {
            if e.pid == Some(pid) {
                e.pid = None;
                ids.push(i);
            }
        }
        Ok(ids)
    }

    pub fn clear(&mut self, writer: WriterId) -> Result<(), TableError> {
        self.check(writer)?;
        self.entries.clear();
        Ok(())
    }
}

/// Picks `count` unassigned entries for `dest`: entries already connected
/// to `dest` first, lowest index first, then the lowest-index unassigned
/// entries with another or no destination. `None` if there are not enough.
pub fn select(entries: &[Assignment], dest: Gid, count: usize) -> Option<Vec<usize>> {
    let free = || entries.iter().enumerate().filter(|(_, e)| e.pid.is_none());
    let mut picked: Vec<usize> = free()
        .filter(|(_, e)| e.destination == Some(dest))
        .map(|(i, _)| i)
        .take(count)
        .collect();
    if picked.len() < count {
        let need = count - picked.len();
        picked.extend(
            free()
                .filter(|(_, e)| e.destination != Some(dest))
                .map(|(i, _)| i)
                .take(need),
        );
    }
    (picked.len() == count).then_some(picked)
}

/// One INIT process as the scheduler sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub pid: Pid,
    /// (QP id, destination) of every established connection.
    pub connections: Vec<(usize, Gid)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub user: String,
    pub function: String,
    pub inits: Vec<InitRecord>,
}

/// Live containers, owned by the scheduler.
#[derive(Debug, Default, Clone)]
pub struct OrchestratorTable {
    entries: BTreeMap<ContainerId, ContainerRecord>,
}

impl OrchestratorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn find(&self, user: &str, function: &str) -> Option<ContainerId> {
        self.entries
            .iter()
            .find(|(_, r)| r.user == user && r.function == function)
            .map(|(id, _)| *id)
    }

    pub fn get(&self, id: ContainerId) -> Option<&ContainerRecord> {
        self.entries.get(&id)
    }

    pub fn insert(&mut self, id: ContainerId, record: ContainerRecord) {
        self.entries.insert(id, record);
    }

    pub fn remove(&mut self, id: ContainerId) -> Option<ContainerRecord> {
        self.entries.remove(&id)
    }

    pub fn add_init(&mut self, id: ContainerId, init: InitRecord) {
        if let Some(r) = self.entries.get_mut(&id) {
            r.inits.push(init);
        }
    }

    /// Replaces the connection list recorded for `pid`.
    pub fn set_connections(&mut self, id: ContainerId, pid: Pid, connections: Vec<(usize, Gid)>) {
        if let Some(init) = self
            .entries
            .get_mut(&id)
            .and_then(|r| r.inits.iter_mut().find(|i| i.pid == pid))
        {
            init.connections = connections;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContainerId, &ContainerRecord)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
