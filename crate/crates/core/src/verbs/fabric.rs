use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Timeline;

use super::device::{CompletionQueue, MemoryRegion, ProtectionDomain};
use super::qp::{EchoConfig, QpInner, QueuePair};
use super::{
    AccessFlags, DeviceContext, Gid, Host, HostConfig, Opcode, QpState, RemoteEndpoint, VerbsError,
    WcStatus, WorkRequest, FUNCTION_MR_BYTES,
};

/// One completed responder-side operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub src: RemoteEndpoint,
    pub dst: RemoteEndpoint,
    pub psn: u32,
    pub opcode: Opcode,
    pub wr_id: u64,
    pub bytes: usize,
    pub status: WcStatus,
    pub completed_at: Duration,
}

/// A QP registered on the fabric, as seen by a sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub endpoint: RemoteEndpoint,
    pub tag: Option<String>,
    pub state: QpState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Size of the key-value region clients read and write one-sided.
    pub kv_bytes: usize,
    /// Size of the per-connection receive buffer.
    pub recv_slot: usize,
    /// Receives posted on every accepted connection.
    pub prepost: usize,
    /// Send every received message straight back.
    pub echo: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            kv_bytes: 64 * 1024,
            recv_slot: FUNCTION_MR_BYTES,
            prepost: 16,
            echo: true,
        }
    }
}

/// What a client needs after connecting to a server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceptInfo {
    pub endpoint: RemoteEndpoint,
    pub kv_rkey: u32,
    pub kv_len: usize,
}

struct Registered {
    qp: Weak<QpInner>,
    tag: Option<String>,
}

struct Listener {
    pd: ProtectionDomain,
    kv: MemoryRegion,
    config: ServerConfig,
    conns: BTreeMap<RemoteEndpoint, QueuePair>,
}

pub(crate) struct FabricInner {
    seed: u64,
    ids: AtomicU64,
    qpns: AtomicU32,
    hosts: Mutex<Vec<Weak<Host>>>,
    endpoints: RwLock<BTreeMap<RemoteEndpoint, Registered>>,
    log: Mutex<Option<Vec<LogRecord>>>,
    log_seq: AtomicU64,
    psn_violations: AtomicU64,
    delivered: AtomicU64,
    listeners: Mutex<BTreeMap<Gid, Listener>>,
}

/// The network all hosts attach to. Cloning shares it.
#[derive(Clone)]
pub struct Fabric {
    inner: Arc<FabricInner>,
}

impl std::fmt::Debug for Fabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fabric")
            .field("hosts", &self.inner.hosts.lock().len())
            .field("endpoints", &self.inner.endpoints.read().len())
            .finish()
    }
}

impl Fabric {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(FabricInner {
                seed,
                ids: AtomicU64::new(1),
                qpns: AtomicU32::new(0x100),
                hosts: Mutex::new(Vec::new()),
                endpoints: RwLock::new(BTreeMap::new()),
                log: Mutex::new(None),
                log_seq: AtomicU64::new(0),
                psn_violations: AtomicU64::new(0),
                delivered: AtomicU64::new(0),
                listeners: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    pub(crate) fn from_inner(inner: Arc<FabricInner>) -> Self {
        Self { inner }
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub(crate) fn next_id(&self) -> u64 {
        self.inner.ids.fetch_add(1, Ordering::SeqCst)
    }

    pub(crate) fn next_qpn(&self) -> u32 {
        self.inner.qpns.fetch_add(1, Ordering::SeqCst)
    }

    /// Attaches a new host. Its RNG is derived from the fabric seed, the
    /// host seed and the host id.
    pub fn add_host(&self, mut config: HostConfig) -> Arc<Host> {
        let mut hosts = self.inner.hosts.lock();
        let id = hosts.len() as u32;
        config.seed ^= self.inner.seed;
        let host = Arc::new(Host::new(id, config, self.inner.clone()));
        hosts.push(Arc::downgrade(&host));
        host
    }

    /// Hosts still referenced somewhere.
    pub fn hosts(&self) -> Vec<Arc<Host>> {
        self.inner
            .hosts
            .lock()
            .iter()
            .filter_map(Weak::upgrade)
            .collect()
    }

    pub(crate) fn register(&self, qp: &Arc<QpInner>, tag: Option<String>) {
        let ep = RemoteEndpoint {
            gid: qp_gid(qp),
            qpn: qp.qpn(),
        };
        self.inner.endpoints.write().insert(
            ep,
            Registered {
                qp: Arc::downgrade(qp),
                tag,
            },
        );
    }

    pub(crate) fn deregister(&self, ep: RemoteEndpoint) {
        self.inner.endpoints.write().remove(&ep);
    }

    pub(crate) fn lookup(&self, ep: RemoteEndpoint) -> Option<Arc<QpInner>> {
        self.inner.endpoints.read().get(&ep)?.qp.upgrade()
    }

    pub fn is_registered(&self, ep: RemoteEndpoint) -> bool {
        self.lookup(ep).is_some()
    }

    /// Live QPs on the fabric.
    pub fn endpoints(&self) -> Vec<Endpoint> {
        let live: Vec<_> = self
            .inner
            .endpoints
            .read()
            .iter()
            .filter_map(|(ep, r)| Some((*ep, r.tag.clone(), r.qp.upgrade()?)))
            .collect();
        live.into_iter()
            .map(|(endpoint, tag, qp)| Endpoint {
                endpoint,
                tag,
                state: qp.state(),
            })
            .collect()
    }

    /// Live QPs created under a context tagged `tag`.
    pub fn qps_tagged(&self, tag: &str) -> Vec<QueuePair> {
        let live: Vec<_> = self
            .inner
            .endpoints
            .read()
            .values()
            .filter(|r| r.tag.as_deref() == Some(tag))
            .filter_map(|r| r.qp.upgrade())
            .collect();
        live.into_iter().map(QueuePair::from_inner).collect()
    }

    pub fn enable_log(&self) {
        let mut log = self.inner.log.lock();
        if log.is_none() {
            *log = Some(Vec::new());
        }
    }

    pub fn log_records(&self) -> Vec<LogRecord> {
        self.inner.log.lock().clone().unwrap_or_default()
    }

    pub(crate) fn log(&self, mut rec: LogRecord) {
        if rec.status == WcStatus::Ok {
            self.inner.delivered.fetch_add(1, Ordering::SeqCst);
        }
        if let Some(log) = self.inner.log.lock().as_mut() {
            rec.seq = self.inner.log_seq.fetch_add(1, Ordering::SeqCst);
            log.push(rec);
        }
    }

    pub(crate) fn note_psn_violation(&self) {
        self.inner.psn_violations.fetch_add(1, Ordering::SeqCst);
    }

    /// Requests that arrived out of PSN order at a responder.
    pub fn psn_violations(&self) -> u64 {
        self.inner.psn_violations.load(Ordering::SeqCst)
    }

    /// Successfully completed responder-side operations.
    pub fn delivered(&self) -> u64 {
        self.inner.delivered.load(Ordering::SeqCst)
    }

    /// Starts a server on device 0 of `host`. Its own setup is charged to a
    /// private timeline and never shows up in client measurements.
    pub fn serve(&self, host: &Arc<Host>, config: ServerConfig) -> Result<Gid, VerbsError> {
        let timeline = Timeline::starting_at(Duration::ZERO);
        let dev = *host
            .devices()
            .first()
            .ok_or(VerbsError::UnknownDevice(super::DeviceId {
                host: host.id(),
                index: 0,
            }))?;
        let ctx: DeviceContext = host.open_device(dev, host.cached_dispatch(), &timeline)?;
        let pd = ctx.alloc_pd()?;
        let kv = pd.reg_mr(config.kv_bytes, AccessFlags::ALL)?;
        for (i, chunk) in kv.snapshot().chunks(8).enumerate() {
            let v = (i as u64).to_le_bytes();
            kv.write(i * 8, &v[..chunk.len()])?;
        }
        let gid = ctx.gid();
        self.inner.listeners.lock().insert(
            gid,
            Listener {
                pd,
                kv,
                config,
                conns: BTreeMap::new(),
            },
        );
        Ok(gid)
    }

    /// The key-value region of the server at `gid`.
    pub fn server_kv(&self, gid: Gid) -> Option<MemoryRegion> {
        self.inner.listeners.lock().get(&gid).map(|l| l.kv.clone())
    }

    /// Creates and connects a server-side QP for `client`, which must be
    /// registered already. The server QP reaches RTS immediately.
    pub fn accept(&self, server: Gid, client: RemoteEndpoint) -> Result<AcceptInfo, VerbsError> {
        let (pd, config, kv) = {
            let listeners = self.inner.listeners.lock();
            let l = listeners
                .get(&server)
                .ok_or(VerbsError::NoListener(server))?;
            (l.pd.clone(), l.config, l.kv.clone())
        };
        let timeline = Timeline::starting_at(Duration::ZERO);
        let pd = pd.with_timeline(timeline.clone());
        let ctx = pd.context();
        let depth = config.prepost.max(1) * 4;
        let cq: CompletionQueue = ctx.create_cq(1 << 20)?;
        let qp = pd.create_qp_with(&cq, &cq, depth)?;
        let slot = pd.reg_mr(config.recv_slot.max(1), AccessFlags::LOCAL_WRITE)?;
        qp.connect(client)?;
        // Server setup is never on a client's path: receives and replies
        // run on a fresh track.
        qp.bind_timeline(Timeline::starting_at(Duration::ZERO));
        for i in 0..config.prepost {
            qp.post_recv(&WorkRequest::recv(i as u64, slot.sge(0, slot.len())))?;
        }
        if config.echo {
            qp.set_echo(EchoConfig { lkey: slot.lkey() });
        }
        let endpoint = qp.endpoint();
        let mut listeners = self.inner.listeners.lock();
        let l = listeners
            .get_mut(&server)
            .ok_or(VerbsError::NoListener(server))?;
        if let Some(old) = l.conns.insert(client, qp) {
            drop(listeners);
            old.close();
        }
        Ok(AcceptInfo {
            endpoint,
            kv_rkey: kv.rkey(),
            kv_len: kv.len(),
        })
    }

    /// Tears down the server-side QP at `server_ep`, if it is one.
    pub(crate) fn release_server_qp(&self, server_ep: RemoteEndpoint) {
        let qp = {
            let mut listeners = self.inner.listeners.lock();
            let Some(l) = listeners.get_mut(&server_ep.gid) else {
                return;
            };
            let key = l
                .conns
                .iter()
                .find(|(_, qp)| qp.endpoint() == server_ep)
                .map(|(k, _)| *k);
            key.and_then(|k| l.conns.remove(&k))
        };
        if let Some(qp) = qp {
            qp.close();
        }
    }

    /// Connections currently held by the server at `gid`.
    pub fn server_connections(&self, gid: Gid) -> usize {
        self.inner
            .listeners
            .lock()
            .get(&gid)
            .map_or(0, |l| l.conns.len())
    }
}

fn qp_gid(qp: &QpInner) -> Gid {
    qp.gid()
}
