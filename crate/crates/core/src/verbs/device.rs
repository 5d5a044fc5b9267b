use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use crate::cache::names::*;
use crate::cache::CacheDispatch;
use crate::clock::Timeline;
use crate::cost::kernel_keys;

use super::qp::QueuePair;
use super::{
    AccessFlags, DeviceId, Fabric, Gid, Host, Sge, VerbsError, WorkCompletion, DEFAULT_QUEUE_DEPTH,
};

pub(crate) struct CtxInner {
    pub(crate) id: u64,
    pub(crate) device: DeviceId,
    pub(crate) gid: Gid,
    pub(crate) host: Arc<Host>,
    pub(crate) fabric: Fabric,
    pub(crate) dispatch: Arc<CacheDispatch>,
    open: AtomicBool,
    tag: Mutex<Option<String>>,
}

/// An opened device. Cloning shares the context; each handle carries the
/// timeline its control-plane calls are charged to.
#[derive(Clone)]
pub struct DeviceContext {
    pub(crate) inner: Arc<CtxInner>,
    timeline: Timeline,
}

impl std::fmt::Debug for DeviceContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceContext")
            .field("id", &self.inner.id)
            .field("device", &self.inner.device)
            .field("open", &self.is_open())
            .finish()
    }
}

impl DeviceContext {
    pub(crate) fn open(
        host: &Arc<Host>,
        device: DeviceId,
        dispatch: Arc<CacheDispatch>,
        timeline: &Timeline,
    ) -> Result<Self, VerbsError> {
        if device.host != host.id() || device.index as usize >= host.config().device_count {
            return Err(VerbsError::UnknownDevice(device));
        }
        let chain: [(&str, &[i64]); 4] = [
            (READ_ENV_CONFIG, &[]),
            (ALLOC_CONTEXT, &[]),
            (PER_CORE_PLATFORM_CHECK, &[]),
            (MAP_UAR_PAGES, &[]),
        ];
        if let Err(e) = dispatch.run_chain(&chain, timeline) {
            dispatch.report_error();
            return Err(e.into());
        }
        timeline.charge(
            "kernel:open_device",
            host.costs().kernel_cost(kernel_keys::OPEN_DEVICE),
        );
        host.check_fault("open_device", &dispatch)?;
        let fabric = host.fabric();
        Ok(Self {
            inner: Arc::new(CtxInner {
                id: fabric.next_id(),
                device,
                gid: host.gid(device.index),
                host: host.clone(),
                fabric,
                dispatch,
                open: AtomicBool::new(true),
                tag: Mutex::new(None),
            }),
            timeline: timeline.clone(),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn device(&self) -> DeviceId {
        self.inner.device
    }

    pub fn gid(&self) -> Gid {
        self.inner.gid
    }

    pub fn host(&self) -> &Arc<Host> {
        &self.inner.host
    }

    pub fn fabric(&self) -> &Fabric {
        &self.inner.fabric
    }

    pub fn dispatch(&self) -> &Arc<CacheDispatch> {
        &self.inner.dispatch
    }

    pub fn kernel_mediated(&self) -> bool {
        self.inner.host.kernel_mediated()
    }

    pub fn is_open(&self) -> bool {
        self.inner.open.load(Ordering::SeqCst)
    }

    pub fn close(&self) {
        self.inner.open.store(false, Ordering::SeqCst);
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    /// Same context, charging to `timeline`.
    pub fn with_timeline(&self, timeline: Timeline) -> Self {
        Self {
            inner: self.inner.clone(),
            timeline,
        }
    }

    /// Label attached to every QP created under this context; used for
    /// fabric sweeps.
    pub fn set_tag(&self, tag: impl Into<String>) {
        *self.inner.tag.lock() = Some(tag.into());
    }

    pub fn tag(&self) -> Option<String> {
        self.inner.tag.lock().clone()
    }

    fn ensure_open(&self) -> Result<(), VerbsError> {
        if self.is_open() {
            Ok(())
        } else {
            Err(VerbsError::ContextClosed(self.inner.id))
        }
    }

    pub(crate) fn run(
        &self,
        api: &'static str,
        chain: &[(&str, &[i64])],
        kernel_key: &str,
        timeline: &Timeline,
    ) -> Result<(), VerbsError> {
        let dispatch = &self.inner.dispatch;
        if let Err(e) = dispatch.run_chain(chain, timeline) {
            dispatch.report_error();
            return Err(e.into());
        }
        timeline.charge(kernel_key, self.inner.host.costs().kernel_cost(kernel_key));
        self.inner.host.check_fault(api, dispatch)
    }

    pub fn alloc_pd(&self) -> Result<ProtectionDomain, VerbsError> {
        self.ensure_open()?;
        self.run(
            "alloc_pd",
            &[(ALLOC_PD_HANDLE, &[])],
            kernel_keys::ALLOC_PD,
            &self.timeline,
        )?;
        Ok(ProtectionDomain {
            inner: Arc::new(PdInner {
                id: self.inner.fabric.next_id(),
                ctx: self.clone(),
                mrs: RwLock::new(BTreeMap::new()),
                rkeys: RwLock::new(BTreeMap::new()),
            }),
            timeline: self.timeline.clone(),
        })
    }

    pub fn create_cq(&self, depth: usize) -> Result<CompletionQueue, VerbsError> {
        self.ensure_open()?;
        if depth == 0 {
            return Err(VerbsError::ZeroDepth);
        }
        self.run(
            "create_cq",
            &[(ALLOC_CQ_BUFFER, &[])],
            kernel_keys::CREATE_CQ,
            &self.timeline,
        )?;
        Ok(CompletionQueue {
            inner: Arc::new(CqInner {
                id: self.inner.fabric.next_id(),
                depth,
                entries: Mutex::new(VecDeque::new()),
            }),
        })
    }
}

pub(crate) struct PdInner {
    pub(crate) id: u64,
    pub(crate) ctx: DeviceContext,
    mrs: RwLock<BTreeMap<u32, MemoryRegion>>,
    rkeys: RwLock<BTreeMap<u32, u32>>,
}

/// Scopes which MRs and QPs may interact.
#[derive(Clone)]
pub struct ProtectionDomain {
    pub(crate) inner: Arc<PdInner>,
    timeline: Timeline,
}

impl std::fmt::Debug for ProtectionDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtectionDomain")
            .field("id", &self.inner.id)
            .field("mrs", &self.inner.mrs.read().len())
            .finish()
    }
}

impl ProtectionDomain {
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// The owning context, charging to this handle's timeline.
    pub fn context(&self) -> DeviceContext {
        self.inner.ctx.with_timeline(self.timeline.clone())
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn with_timeline(&self, timeline: Timeline) -> Self {
        Self {
            inner: self.inner.clone(),
            timeline,
        }
    }

    pub fn same_as(&self, other: &ProtectionDomain) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn reg_mr(&self, length: usize, access: AccessFlags) -> Result<MemoryRegion, VerbsError> {
        let ctx = &self.inner.ctx;
        ctx.ensure_open()?;
        if length == 0 {
            return Err(VerbsError::ZeroLengthMr);
        }
        ctx.run(
            "reg_mr",
            &[(PIN_PAGES, &[length as i64])],
            kernel_keys::REG_MR,
            &self.timeline,
        )?;
        Ok(self.insert_mr(vec![0u8; length], access))
    }

    /// Registers a private copy of `mr`'s current contents with fresh keys.
    /// No cost is charged: the caller accounts for it.
    pub fn register_copy(&self, mr: &MemoryRegion) -> MemoryRegion {
        self.insert_mr(mr.snapshot(), mr.access())
    }

    fn insert_mr(&self, buf: Vec<u8>, access: AccessFlags) -> MemoryRegion {
        let host = &self.inner.ctx.inner.host;
        let mut mrs = self.inner.mrs.write();
        let mut rkeys = self.inner.rkeys.write();
        let fresh = |k: u32, mrs: &BTreeMap<u32, MemoryRegion>, rkeys: &BTreeMap<u32, u32>| {
            k != 0 && !mrs.contains_key(&k) && !rkeys.contains_key(&k)
        };
        let lkey = loop {
            let k = host.random_key();
            if fresh(k, &mrs, &rkeys) {
                break k;
            }
        };
        let rkey = loop {
            let k = host.random_key();
            if k != lkey && fresh(k, &mrs, &rkeys) {
                break k;
            }
        };
        let id = self.inner.ctx.inner.fabric.next_id();
        let mr = MemoryRegion {
            inner: Arc::new(MrInner {
                id,
                pd: self.inner.id,
                addr: 0x1000_0000 + id * 0x10_0000,
                lkey,
                rkey,
                access,
                buf: Mutex::new(buf),
                registered: AtomicBool::new(true),
            }),
        };
        mrs.insert(lkey, mr.clone());
        rkeys.insert(rkey, lkey);
        mr
    }

    pub fn dereg_mr(&self, mr: &MemoryRegion) -> bool {
        let removed = self.inner.mrs.write().remove(&mr.lkey()).is_some();
        if removed {
            self.inner.rkeys.write().remove(&mr.rkey());
            mr.inner.registered.store(false, Ordering::SeqCst);
        }
        removed
    }

    pub fn by_lkey(&self, lkey: u32) -> Option<MemoryRegion> {
        self.inner.mrs.read().get(&lkey).cloned()
    }

    pub fn by_rkey(&self, rkey: u32) -> Option<MemoryRegion> {
        let lkey = *self.inner.rkeys.read().get(&rkey)?;
        self.by_lkey(lkey)
    }

    pub fn mr_count(&self) -> usize {
        self.inner.mrs.read().len()
    }

    /// Creates an RC QP in RESET using `cq` for both directions.
    pub fn create_qp(&self, cq: &CompletionQueue) -> Result<QueuePair, VerbsError> {
        self.create_qp_with(cq, cq, DEFAULT_QUEUE_DEPTH)
    }

    pub fn create_qp_with(
        &self,
        send_cq: &CompletionQueue,
        recv_cq: &CompletionQueue,
        depth: usize,
    ) -> Result<QueuePair, VerbsError> {
        let ctx = &self.inner.ctx;
        ctx.ensure_open()?;
        if depth == 0 {
            return Err(VerbsError::ZeroDepth);
        }
        ctx.run(
            "create_qp",
            &[(QUERY_PORT_ATTRS, &[]), (ALLOC_QP_BUFFERS, &[])],
            kernel_keys::CREATE_QP,
            &self.timeline,
        )?;
        Ok(QueuePair::new(
            self.clone(),
            send_cq.clone(),
            recv_cq.clone(),
            depth,
            self.timeline.clone(),
        ))
    }
}

pub(crate) struct MrInner {
    id: u64,
    pd: u64,
    addr: u64,
    lkey: u32,
    rkey: u32,
    access: AccessFlags,
    buf: Mutex<Vec<u8>>,
    registered: AtomicBool,
}

/// A registered buffer.
#[derive(Clone)]
pub struct MemoryRegion {
    inner: Arc<MrInner>,
}

impl std::fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("id", &self.inner.id)
            .field("len", &self.len())
            .field("lkey", &self.inner.lkey)
            .field("rkey", &self.inner.rkey)
            .finish()
    }
}

impl MemoryRegion {
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn pd_id(&self) -> u64 {
        self.inner.pd
    }

    /// Simulated virtual address of the first byte.
    pub fn addr(&self) -> u64 {
        self.inner.addr
    }

    pub fn len(&self) -> usize {
        self.inner.buf.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lkey(&self) -> u32 {
        self.inner.lkey
    }

    pub fn rkey(&self) -> u32 {
        self.inner.rkey
    }

    pub fn access(&self) -> AccessFlags {
        self.inner.access
    }

    pub fn is_registered(&self) -> bool {
        self.inner.registered.load(Ordering::SeqCst)
    }

    pub fn same_as(&self, other: &MemoryRegion) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Whether `[offset, offset + length)` lies inside the region.
    pub fn contains(&self, offset: usize, length: usize) -> bool {
        offset
            .checked_add(length)
            .is_some_and(|end| end <= self.len())
    }

    fn bounds(&self, offset: usize, length: usize) -> Result<(), VerbsError> {
        if self.contains(offset, length) {
            Ok(())
        } else {
            Err(VerbsError::OutOfBounds {
                offset,
                length,
                len: self.len(),
            })
        }
    }

    pub fn read(&self, offset: usize, length: usize) -> Result<Vec<u8>, VerbsError> {
        self.bounds(offset, length)?;
        Ok(self.inner.buf.lock()[offset..offset + length].to_vec())
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<(), VerbsError> {
        self.bounds(offset, data.len())?;
        self.inner.buf.lock()[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn fill(&self, byte: u8) {
        self.inner.buf.lock().fill(byte);
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.inner.buf.lock().clone()
    }

    pub fn sge(&self, offset: usize, length: usize) -> Sge {
        Sge {
            lkey: self.inner.lkey,
            offset,
            length,
        }
    }
}

pub(crate) struct CqInner {
    id: u64,
    depth: usize,
    entries: Mutex<VecDeque<WorkCompletion>>,
}

#[derive(Clone)]
pub struct CompletionQueue {
    inner: Arc<CqInner>,
}

impl std::fmt::Debug for CompletionQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompletionQueue")
            .field("id", &self.inner.id)
            .field("pending", &self.len())
            .finish()
    }
}

impl CompletionQueue {
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn depth(&self) -> usize {
        self.inner.depth
    }

    pub fn len(&self) -> usize {
        self.inner.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.inner.depth
    }

    pub(crate) fn push(&self, wc: WorkCompletion) {
        self.inner.entries.lock().push_back(wc);
    }

    /// Takes up to `max` completions in arrival order.
    pub fn poll(&self, max: usize) -> Vec<WorkCompletion> {
        let mut q = self.inner.entries.lock();
        let n = max.min(q.len());
        q.drain(..n).collect()
    }

    /// Like [`poll`](Self::poll), and moves `timeline` forward to the
    /// latest completion instant returned.
    pub fn poll_wait(&self, max: usize, timeline: &Timeline) -> Vec<WorkCompletion> {
        let wcs = self.poll(max);
        if let Some(latest) = wcs.iter().map(|w| w.completed_at).max() {
            timeline.advance_to(latest);
        }
        wcs
    }

    /// Instant of the latest queued completion, if any.
    pub fn latest(&self) -> Option<Duration> {
        self.inner
            .entries
            .lock()
            .iter()
            .map(|w| w.completed_at)
            .max()
    }
}
