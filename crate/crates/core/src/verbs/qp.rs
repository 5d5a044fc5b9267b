use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::cache::names::*;
use crate::clock::{micros, Timeline};
use crate::cost::kernel_keys;

use super::device::{CompletionQueue, ProtectionDomain};
use super::fabric::LogRecord;
use super::{AccessFlags, Gid, Opcode, QpState, VerbsError, WcStatus, WorkCompletion, WorkRequest};

/// Address of a QP on the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub gid: Gid,
    pub qpn: u32,
}

impl fmt::Display for RemoteEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.gid, self.qpn)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModifyParams {
    /// Required for the INIT -> RTR step.
    pub remote: Option<RemoteEndpoint>,
}

impl ModifyParams {
    pub fn to(remote: RemoteEndpoint) -> Self {
        Self {
            remote: Some(remote),
        }
    }
}

#[derive(Debug)]
struct RecvEntry {
    wr_id: u64,
    lkey: u32,
    offset: usize,
    length: usize,
    posted_at: Duration,
}

/// A SEND that reached this QP before a RECV was posted for it.
struct Inbound {
    from: Weak<QpInner>,
    from_ep: RemoteEndpoint,
    wr_id: u64,
    psn: u32,
    payload: Vec<u8>,
    arrives_at: Duration,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EchoConfig {
    pub lkey: u32,
}

struct QpCore {
    state: QpState,
    remote: Option<RemoteEndpoint>,
    rq: VecDeque<RecvEntry>,
    inbound: VecDeque<Inbound>,
    next_send_psn: u32,
    expected_recv_psn: u32,
    echo: Option<EchoConfig>,
}

pub(crate) struct QpInner {
    qpn: u32,
    gid: Gid,
    pd: ProtectionDomain,
    send_cq: CompletionQueue,
    recv_cq: CompletionQueue,
    depth: usize,
    tag: Option<String>,
    /// Serialises posts on the send queue so PSN order is delivery order.
    send_serial: Mutex<()>,
    core: Mutex<QpCore>,
    timeline: Mutex<Timeline>,
    /// SENDs parked at the peer awaiting a RECV.
    outstanding: AtomicUsize,
    closed: AtomicBool,
}

/// An RC queue pair.
#[derive(Clone)]
pub struct QueuePair {
    pub(crate) inner: Arc<QpInner>,
}

impl fmt::Debug for QueuePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QueuePair")
            .field("qpn", &self.inner.qpn)
            .field("state", &self.state())
            .field("remote", &self.remote())
            .finish()
    }
}

/// Work to run once every lock of the posting QP is released.
struct EchoTask {
    server: Arc<QpInner>,
    len: usize,
    arrival: Duration,
}

enum Accept {
    Delivered {
        at: Duration,
        status: WcStatus,
        echo: Option<EchoTask>,
    },
    Deferred,
    Rejected(WcStatus),
    Full,
}

impl QueuePair {
    pub(crate) fn new(
        pd: ProtectionDomain,
        send_cq: CompletionQueue,
        recv_cq: CompletionQueue,
        depth: usize,
        timeline: Timeline,
    ) -> Self {
        let ctx = pd.context();
        let fabric = ctx.fabric().clone();
        let inner = Arc::new(QpInner {
            qpn: fabric.next_qpn(),
            gid: ctx.gid(),
            tag: ctx.tag(),
            pd,
            send_cq,
            recv_cq,
            depth,
            send_serial: Mutex::new(()),
            core: Mutex::new(QpCore {
                state: QpState::Reset,
                remote: None,
                rq: VecDeque::new(),
                inbound: VecDeque::new(),
                next_send_psn: 0,
                expected_recv_psn: 0,
                echo: None,
            }),
            timeline: Mutex::new(timeline),
            outstanding: AtomicUsize::new(0),
            closed: AtomicBool::new(false),
        });
        fabric.register(&inner, inner.tag.clone());
        Self { inner }
    }

    pub(crate) fn from_inner(inner: Arc<QpInner>) -> Self {
        Self { inner }
    }

    pub fn qpn(&self) -> u32 {
        self.inner.qpn
    }

    pub fn gid(&self) -> Gid {
        self.inner.gid
    }

    pub fn endpoint(&self) -> RemoteEndpoint {
        self.inner.endpoint()
    }

    pub fn state(&self) -> QpState {
        self.inner.core.lock().state
    }

    pub fn remote(&self) -> Option<RemoteEndpoint> {
        self.inner.core.lock().remote
    }

    pub fn pd(&self) -> &ProtectionDomain {
        &self.inner.pd
    }

    pub fn send_cq(&self) -> &CompletionQueue {
        &self.inner.send_cq
    }

    pub fn recv_cq(&self) -> &CompletionQueue {
        &self.inner.recv_cq
    }

    pub fn depth(&self) -> usize {
        self.inner.depth
    }

    pub fn tag(&self) -> Option<&str> {
        self.inner.tag.as_deref()
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    pub fn same_as(&self, other: &QueuePair) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn timeline(&self) -> Timeline {
        self.inner.timeline.lock().clone()
    }

    /// Charges subsequent work on this QP to `timeline`.
    pub fn bind_timeline(&self, timeline: Timeline) {
        *self.inner.timeline.lock() = timeline;
    }

    pub fn posted_recvs(&self) -> usize {
        self.inner.core.lock().rq.len()
    }

    pub fn outstanding_sends(&self) -> usize {
        self.inner.outstanding.load(Ordering::SeqCst)
    }

    pub(crate) fn set_echo(&self, echo: EchoConfig) {
        self.inner.core.lock().echo = Some(echo);
    }

    /// Advances the RC state machine by one step.
    pub fn modify_qp(&self, target: QpState, params: &ModifyParams) -> Result<(), VerbsError> {
        if self.is_closed() {
            return Err(VerbsError::QpClosed(self.inner.qpn));
        }
        let timeline = self.timeline();
        let ctx = self.inner.pd.context();
        let kernel_mediated = ctx.kernel_mediated();
        let costs = ctx.host().costs().clone();
        let mut core = self.inner.core.lock();
        let from = core.state;
        if !from.can_transition(target) {
            return Err(VerbsError::IllegalTransition { from, to: target });
        }
        match target {
            QpState::Init => {
                if !kernel_mediated {
                    ctx.run(
                        "modify_qp",
                        &[(SET_QP_ATTRS, &[])],
                        kernel_keys::MODIFY_QP_INIT,
                        &timeline,
                    )?;
                }
            }
            QpState::Rtr => {
                let remote = params.remote.ok_or(VerbsError::MissingRemote)?;
                if !kernel_mediated {
                    ctx.run(
                        "modify_qp",
                        &[
                            (QUERY_GID_TABLE, &[]),
                            (RESOLVE_PATH, &[remote.gid.digest()]),
                        ],
                        kernel_keys::MODIFY_QP_RTR,
                        &timeline,
                    )?;
                }
                core.remote = Some(remote);
            }
            QpState::Rts => {
                let remote = core.remote.expect("RTR always sets the remote endpoint");
                if !ctx.fabric().is_registered(remote) {
                    return Err(VerbsError::PeerUnreachable(remote));
                }
                if kernel_mediated {
                    timeline.charge("kernel_connect", micros(costs.kernel_connect_cost));
                } else {
                    ctx.run(
                        "modify_qp",
                        &[(SET_QP_ATTRS, &[])],
                        kernel_keys::MODIFY_QP_RTS,
                        &timeline,
                    )?;
                    timeline.charge("qp_connect", micros(costs.qp_connect_cost));
                }
            }
            QpState::Error => {
                let now = timeline.now();
                let parked = self.inner.flush(&mut core, now);
                core.remote = None;
                core.state = target;
                drop(core);
                self.inner.recall_parked(parked, now);
                return Ok(());
            }
            QpState::Reset => unreachable!("RESET is never a legal modify target"),
        }
        core.state = target;
        Ok(())
    }

    /// RESET -> INIT -> RTR -> RTS towards `remote`.
    pub fn connect(&self, remote: RemoteEndpoint) -> Result<(), VerbsError> {
        self.modify_qp(QpState::Init, &ModifyParams::default())?;
        self.modify_qp(QpState::Rtr, &ModifyParams::to(remote))?;
        self.modify_qp(QpState::Rts, &ModifyParams::default())
    }

    /// Returns the QP to RESET so it can be connected elsewhere. Pending
    /// work is flushed with `CONN_ERR`; a server-side peer created by an
    /// acceptor is torn down.
    pub fn reset(&self) {
        let now = self.timeline().now();
        let (old_remote, parked) = {
            let mut core = self.inner.core.lock();
            let parked = self.inner.flush(&mut core, now);
            core.state = QpState::Reset;
            core.next_send_psn = 0;
            core.expected_recv_psn = 0;
            (core.remote.take(), parked)
        };
        self.inner.recall_parked(parked, now);
        if let Some(remote) = old_remote {
            self.inner.pd.context().fabric().release_server_qp(remote);
        }
    }

    /// Resets the QP and removes it from the fabric for good.
    pub fn close(&self) {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.reset();
        self.inner.pd.context().fabric().deregister(self.endpoint());
    }

    /// Posts a SEND, RDMA_READ or RDMA_WRITE.
    ///
    /// Only capacity problems are returned as errors. Everything else
    /// (wrong state, bad keys, out-of-bounds access) produces a completion
    /// with the matching status.
    pub fn post_send(&self, wr: &WorkRequest) -> Result<(), VerbsError> {
        if wr.opcode == Opcode::Recv {
            return Err(VerbsError::WrongQueue(wr.opcode));
        }
        let echo = {
            let _serial = self.inner.send_serial.lock();
            self.post_send_locked(wr)?
        };
        if let Some(task) = echo {
            task.run();
        }
        Ok(())
    }

    fn post_send_locked(&self, wr: &WorkRequest) -> Result<Option<EchoTask>, VerbsError> {
        let inner = &self.inner;
        if self.is_closed() {
            return Err(VerbsError::QpClosed(inner.qpn));
        }
        if inner.outstanding.load(Ordering::SeqCst) >= inner.depth {
            return Err(VerbsError::QueueFull {
                qpn: inner.qpn,
                queue: "send",
                depth: inner.depth,
            });
        }
        if inner.send_cq.is_full() {
            return Err(VerbsError::QueueFull {
                qpn: inner.qpn,
                queue: "completion",
                depth: inner.send_cq.depth(),
            });
        }
        let ctx = inner.pd.context();
        let costs = ctx.host().costs().clone();
        let timeline = self.timeline();
        timeline.charge("post_send", costs.data_op(ctx.kernel_mediated()));
        let posted = timeline.now();
        let complete = |status: WcStatus, at: Duration, byte_len: usize| {
            inner.send_cq.push(WorkCompletion {
                wr_id: wr.wr_id,
                qpn: inner.qpn,
                opcode: wr.opcode,
                status,
                byte_len,
                completed_at: at,
            });
        };

        let (state, remote) = {
            let core = inner.core.lock();
            (core.state, core.remote)
        };
        let remote = match (state, remote) {
            (QpState::Rts, Some(r)) => r,
            _ => {
                complete(WcStatus::ConnErr, posted, 0);
                return Ok(None);
            }
        };

        // Local validation happens before anything reaches the wire.
        let local = inner
            .pd
            .by_lkey(wr.local.lkey)
            .filter(|mr| mr.contains(wr.local.offset, wr.local.length))
            .filter(|mr| {
                wr.opcode != Opcode::RdmaRead || mr.access().contains(AccessFlags::LOCAL_WRITE)
            });
        let Some(local) = local else {
            complete(WcStatus::ProtectionErr, posted, 0);
            return Ok(None);
        };
        let fabric = ctx.fabric();
        let Some(peer) = fabric.lookup(remote) else {
            complete(WcStatus::ConnErr, posted, 0);
            return Ok(None);
        };

        let psn = {
            let mut core = inner.core.lock();
            let psn = core.next_send_psn;
            core.next_send_psn = psn.wrapping_add(1);
            psn
        };
        let arrives = posted + costs.nic();
        let me = inner.endpoint();
        let record = |status: WcStatus, bytes: usize, at: Duration| LogRecord {
            seq: 0,
            src: me,
            dst: remote,
            psn,
            opcode: wr.opcode,
            wr_id: wr.wr_id,
            bytes,
            status,
            completed_at: at,
        };

        match wr.opcode {
            Opcode::Send => {
                let payload = local
                    .read(wr.local.offset, wr.local.length)
                    .expect("bounds checked above");
                let len = payload.len();
                let msg = Inbound {
                    from: Arc::downgrade(inner),
                    from_ep: me,
                    wr_id: wr.wr_id,
                    psn,
                    payload,
                    arrives_at: arrives,
                };
                match peer.accept_send(msg) {
                    Accept::Delivered { at, status, echo } => {
                        complete(status, at, if status == WcStatus::Ok { len } else { 0 });
                        return Ok(echo);
                    }
                    Accept::Deferred => {
                        inner.outstanding.fetch_add(1, Ordering::SeqCst);
                    }
                    Accept::Rejected(status) => {
                        fabric.log(record(status, 0, arrives));
                        complete(status, arrives, 0);
                    }
                    Accept::Full => {
                        let mut core = inner.core.lock();
                        core.next_send_psn = psn;
                        return Err(VerbsError::QueueFull {
                            qpn: peer.qpn,
                            queue: "remote receive",
                            depth: peer.depth,
                        });
                    }
                }
            }
            Opcode::RdmaWrite => {
                let data = local
                    .read(wr.local.offset, wr.local.length)
                    .expect("bounds checked above");
                let target = wr
                    .remote
                    .unwrap_or(super::RemoteAddr { rkey: 0, offset: 0 });
                let status = peer.remote_access(me, psn, |pd| {
                    let mr = pd.by_rkey(target.rkey)?;
                    if !mr.access().contains(AccessFlags::REMOTE_WRITE) {
                        return None;
                    }
                    mr.write(target.offset, &data).ok()
                });
                let status = status.map(|_| WcStatus::Ok).unwrap_or_else(|s| s);
                let bytes = if status == WcStatus::Ok {
                    data.len()
                } else {
                    0
                };
                fabric.log(record(status, bytes, arrives));
                complete(status, arrives, bytes);
            }
            Opcode::RdmaRead => {
                let target = wr
                    .remote
                    .unwrap_or(super::RemoteAddr { rkey: 0, offset: 0 });
                let length = wr.local.length;
                let fetched = peer.remote_access(me, psn, |pd| {
                    let mr = pd.by_rkey(target.rkey)?;
                    if !mr.access().contains(AccessFlags::REMOTE_READ) {
                        return None;
                    }
                    mr.read(target.offset, length).ok()
                });
                let status = match fetched {
                    Ok(data) => {
                        local
                            .write(wr.local.offset, &data)
                            .expect("bounds checked above");
                        WcStatus::Ok
                    }
                    Err(s) => s,
                };
                let bytes = if status == WcStatus::Ok { length } else { 0 };
                fabric.log(record(status, bytes, arrives));
                complete(status, arrives, bytes);
            }
            Opcode::Recv => unreachable!(),
        }
        Ok(None)
    }

    /// Posts a RECV. A SEND already waiting for it is delivered at once.
    pub fn post_recv(&self, wr: &WorkRequest) -> Result<(), VerbsError> {
        if wr.opcode != Opcode::Recv {
            return Err(VerbsError::WrongQueue(wr.opcode));
        }
        let echo = self.post_recv_inner(wr)?;
        if let Some(task) = echo {
            task.run();
        }
        Ok(())
    }

    fn post_recv_inner(&self, wr: &WorkRequest) -> Result<Option<EchoTask>, VerbsError> {
        let inner = &self.inner;
        if self.is_closed() {
            return Err(VerbsError::QpClosed(inner.qpn));
        }
        let ctx = inner.pd.context();
        let costs = ctx.host().costs().clone();
        let timeline = self.timeline();
        let mut core = inner.core.lock();
        if core.rq.len() >= inner.depth {
            return Err(VerbsError::QueueFull {
                qpn: inner.qpn,
                queue: "receive",
                depth: inner.depth,
            });
        }
        if inner.recv_cq.is_full() {
            return Err(VerbsError::QueueFull {
                qpn: inner.qpn,
                queue: "completion",
                depth: inner.recv_cq.depth(),
            });
        }
        timeline.charge("post_recv", costs.data_op(ctx.kernel_mediated()));
        let posted = timeline.now();
        let fail = |status: WcStatus| {
            inner.recv_cq.push(WorkCompletion {
                wr_id: wr.wr_id,
                qpn: inner.qpn,
                opcode: Opcode::Recv,
                status,
                byte_len: 0,
                completed_at: posted,
            });
        };
        if !matches!(core.state, QpState::Init | QpState::Rtr | QpState::Rts) {
            fail(WcStatus::ConnErr);
            return Ok(None);
        }
        let valid = inner.pd.by_lkey(wr.local.lkey).is_some_and(|mr| {
            mr.contains(wr.local.offset, wr.local.length)
                && mr.access().contains(AccessFlags::LOCAL_WRITE)
        });
        if !valid {
            fail(WcStatus::ProtectionErr);
            return Ok(None);
        }
        let entry = RecvEntry {
            wr_id: wr.wr_id,
            lkey: wr.local.lkey,
            offset: wr.local.offset,
            length: wr.local.length,
            posted_at: posted,
        };
        match core.inbound.pop_front() {
            Some(msg) => Ok(inner.deliver(&mut core, entry, msg, true).1),
            None => {
                core.rq.push_back(entry);
                Ok(None)
            }
        }
    }
}

impl QpInner {
    fn endpoint(&self) -> RemoteEndpoint {
        RemoteEndpoint {
            gid: self.gid,
            qpn: self.qpn,
        }
    }

    pub(crate) fn qpn(&self) -> u32 {
        self.qpn
    }

    pub(crate) fn gid(&self) -> Gid {
        self.gid
    }

    pub(crate) fn state(&self) -> QpState {
        self.core.lock().state
    }

    /// Responder-side admission of a request packet from `from`.
    fn admit(&self, core: &mut QpCore, from: RemoteEndpoint, psn: u32) -> Result<(), WcStatus> {
        if self.closed.load(Ordering::SeqCst)
            || !core.state.is_connected()
            || core.remote != Some(from)
        {
            return Err(WcStatus::ConnErr);
        }
        let fabric = self.pd.context().fabric().clone();
        if psn != core.expected_recv_psn {
            fabric.note_psn_violation();
        }
        core.expected_recv_psn = psn.wrapping_add(1);
        Ok(())
    }

    fn accept_send(&self, msg: Inbound) -> Accept {
        let mut core = self.core.lock();
        if let Err(s) = self.admit(&mut core, msg.from_ep, msg.psn) {
            return Accept::Rejected(s);
        }
        match core.rq.pop_front() {
            Some(entry) => {
                let ((at, status), echo) = self.deliver(&mut core, entry, msg, false);
                Accept::Delivered { at, status, echo }
            }
            None => {
                if core.inbound.len() >= self.depth {
                    // Undo the admission so the retransmission is in order.
                    core.expected_recv_psn = msg.psn;
                    return Accept::Full;
                }
                core.inbound.push_back(msg);
                Accept::Deferred
            }
        }
    }

    /// Lands `msg` in the buffer named by `entry`. Completes the receiver,
    /// and the sender too when the send had been parked here. Returns
    /// `((instant, sender status), echo)`.
    fn deliver(
        &self,
        core: &mut QpCore,
        entry: RecvEntry,
        msg: Inbound,
        deferred: bool,
    ) -> ((Duration, WcStatus), Option<EchoTask>) {
        let at = msg.arrives_at.max(entry.posted_at);
        let len = msg.payload.len();
        let status = match self.pd.by_lkey(entry.lkey) {
            Some(mr) if len <= entry.length && mr.write(entry.offset, &msg.payload).is_ok() => {
                WcStatus::Ok
            }
            _ => WcStatus::ProtectionErr,
        };
        let ok = status == WcStatus::Ok;
        self.recv_cq.push(WorkCompletion {
            wr_id: entry.wr_id,
            qpn: self.qpn,
            opcode: Opcode::Recv,
            status,
            byte_len: if ok { len } else { 0 },
            completed_at: at,
        });
        let fabric = self.pd.context().fabric().clone();
        fabric.log(LogRecord {
            seq: 0,
            src: msg.from_ep,
            dst: self.endpoint(),
            psn: msg.psn,
            opcode: Opcode::Send,
            wr_id: msg.wr_id,
            bytes: if ok { len } else { 0 },
            status,
            completed_at: at,
        });
        if deferred {
            if let Some(sender) = msg.from.upgrade() {
                sender.outstanding.fetch_sub(1, Ordering::SeqCst);
                sender.send_cq.push(WorkCompletion {
                    wr_id: msg.wr_id,
                    qpn: sender.qpn,
                    opcode: Opcode::Send,
                    status,
                    byte_len: if ok { len } else { 0 },
                    completed_at: at,
                });
            }
        }
        let echo = match (core.echo, ok) {
            (Some(_), true) => self.self_arc().map(|server| EchoTask {
                server,
                len,
                arrival: at,
            }),
            _ => None,
        };
        ((at, status), echo)
    }

    fn self_arc(&self) -> Option<Arc<QpInner>> {
        self.pd.context().fabric().lookup(self.endpoint())
    }

    /// Runs a one-sided access against this QP's protection domain.
    fn remote_access<T>(
        &self,
        from: RemoteEndpoint,
        psn: u32,
        op: impl FnOnce(&ProtectionDomain) -> Option<T>,
    ) -> Result<T, WcStatus> {
        let mut core = self.core.lock();
        self.admit(&mut core, from, psn)?;
        op(&self.pd).ok_or(WcStatus::ProtectionErr)
    }

    /// Fails every pending receive and every SEND parked here. Returns the
    /// peer holding our own parked SENDs, if any; the caller fails those
    /// with [`recall_parked`](Self::recall_parked) once `core` is released.
    fn flush(&self, core: &mut QpCore, now: Duration) -> Option<RemoteEndpoint> {
        for entry in core.rq.drain(..) {
            self.recv_cq.push(WorkCompletion {
                wr_id: entry.wr_id,
                qpn: self.qpn,
                opcode: Opcode::Recv,
                status: WcStatus::ConnErr,
                byte_len: 0,
                completed_at: now,
            });
        }
        for msg in core.inbound.drain(..) {
            if let Some(sender) = msg.from.upgrade() {
                sender.outstanding.fetch_sub(1, Ordering::SeqCst);
                sender.send_cq.push(WorkCompletion {
                    wr_id: msg.wr_id,
                    qpn: sender.qpn,
                    opcode: Opcode::Send,
                    status: WcStatus::ConnErr,
                    byte_len: 0,
                    completed_at: now.max(msg.arrives_at),
                });
            }
        }
        core.remote
            .filter(|_| self.outstanding.load(Ordering::SeqCst) > 0)
    }

    fn recall_parked(&self, peer: Option<RemoteEndpoint>, now: Duration) {
        let Some(remote) = peer else { return };
        let fabric = self.pd.context().fabric().clone();
        if let Some(peer) = fabric.lookup(remote) {
            if !std::ptr::eq(Arc::as_ptr(&peer), self) {
                peer.drop_inbound_from(self.endpoint(), now);
            }
        }
    }

    fn drop_inbound_from(&self, from: RemoteEndpoint, now: Duration) {
        let mut core = self.core.lock();
        let (mine, rest): (Vec<_>, Vec<_>) =
            core.inbound.drain(..).partition(|m| m.from_ep == from);
        core.inbound = rest.into();
        drop(core);
        for msg in mine {
            if let Some(sender) = msg.from.upgrade() {
                sender.outstanding.fetch_sub(1, Ordering::SeqCst);
                sender.send_cq.push(WorkCompletion {
                    wr_id: msg.wr_id,
                    qpn: sender.qpn,
                    opcode: Opcode::Send,
                    status: WcStatus::ConnErr,
                    byte_len: 0,
                    completed_at: now,
                });
            }
        }
    }
}

impl EchoTask {
    /// The server re-arms its receive and sends the payload back.
    fn run(self) {
        let qp = QueuePair::from_inner(self.server);
        let timeline = qp.timeline();
        timeline.advance_to(self.arrival);
        let Some(EchoConfig { lkey }) = qp.inner.core.lock().echo else {
            return;
        };
        let Some(mr) = qp.pd().by_lkey(lkey) else {
            return;
        };
        let slot = mr.len();
        let _ = qp.post_recv(&WorkRequest::recv(u64::MAX, mr.sge(0, slot)));
        let _ = qp.post_send(&WorkRequest::send(u64::MAX, mr.sge(0, self.len)));
        qp.send_cq().poll(usize::MAX);
        qp.recv_cq().poll(usize::MAX);
    }
}
