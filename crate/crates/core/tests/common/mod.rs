//! Randomized checks shared by the per-area suites and the acceptance run.
//! Each one is driven by a seed and reports the first violation it finds.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use elastic_rdma::clock::{micros, Timeline};
use elastic_rdma::cost::CostModel;
use elastic_rdma::fork::{Pid, ProcessTable, RdmaView};
use elastic_rdma::orchestrator::{
    select, Assignment, LatencyClass, Orchestrator, RequestSpec, ScenarioConfig, Scheme,
    TimingBreakdown,
};
use elastic_rdma::verbs::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check<T = ()> = Result<T, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conserved(t: &TimingBreakdown) -> bool {
    (t.task_launch + t.visible_control_plane + t.data_exchange - t.end_to_end).abs() < 1e-6
}

fn open(host: &Arc<Host>) -> DeviceContext {
    let t = Timeline::starting_at(Duration::ZERO);
    host.open_device(host.devices()[0], host.cached_dispatch(), &t)
        .unwrap()
}

// ---- QP state machine ----

#[derive(Debug, Clone, Copy)]
enum QpOp {
    Modify(QpState, bool),
    Reset,
    Write,
    Recv,
}

/// The RC edges, written out independently of the library.
fn legal(from: QpState, to: QpState) -> bool {
    use QpState::*;
    to == Error || [(Reset, Init), (Init, Rtr), (Rtr, Rts)].contains(&(from, to))
}

/// One random sequence of transitions and posts on a QP, compared against
/// a plain model of the RC state machine. Returns the number of operations.
pub fn qp_transition_sequence(seed: u64, len: usize) -> Check<usize> {
    let mut rng = rng(seed);
    let fabric = Fabric::new(seed);
    let host = fabric.add_host(HostConfig::default());
    let ctx = open(&host);
    let pd = ctx.alloc_pd().unwrap();
    let cq = ctx.create_cq(1024).unwrap();
    let qp = pd.create_qp(&cq).unwrap();
    let mr = pd.reg_mr(64, AccessFlags::ALL).unwrap();
    let peer_pd = ctx.alloc_pd().unwrap();
    let peers: Vec<(QueuePair, MemoryRegion)> = (0..2)
        .map(|_| {
            let p = peer_pd.create_qp(&cq).unwrap();
            p.connect(qp.endpoint()).unwrap();
            (p, peer_pd.reg_mr(64, AccessFlags::ALL).unwrap())
        })
        .collect();

    let states = [
        QpState::Reset,
        QpState::Init,
        QpState::Rtr,
        QpState::Rts,
        QpState::Error,
    ];
    let mut state = QpState::Reset;
    let mut remote: Option<usize> = None;
    let mut queued_recvs = 0usize;
    for i in 0..len as u64 {
        let op = match rng.random_range(0..10) {
            0..=4 => QpOp::Modify(states[rng.random_range(0..5)], rng.random_bool(0.8)),
            5 => QpOp::Reset,
            6..=7 => QpOp::Write,
            _ => QpOp::Recv,
        };
        let from = state;
        let ctx_msg = || format!("seed {seed} op {i} {op:?} from {from}");
        match op {
            QpOp::Modify(to, with_remote) => {
                let target = rng.random_range(0..peers.len());
                let params = if with_remote {
                    ModifyParams::to(peers[target].0.endpoint())
                } else {
                    ModifyParams::default()
                };
                let got = qp.modify_qp(to, &params);
                if !legal(state, to) {
                    ensure!(
                        matches!(got, Err(VerbsError::IllegalTransition { .. })),
                        "{}: expected illegal, got {got:?}",
                        ctx_msg()
                    );
                } else if to == QpState::Rtr && !with_remote {
                    ensure!(
                        matches!(got, Err(VerbsError::MissingRemote)),
                        "{}: expected missing remote, got {got:?}",
                        ctx_msg()
                    );
                } else {
                    ensure!(got.is_ok(), "{}: {got:?}", ctx_msg());
                    if to == QpState::Rtr {
                        remote = Some(target);
                    }
                    if to == QpState::Error {
                        let flushed = drain(&cq, Opcode::Recv);
                        ensure!(
                            flushed.len() == queued_recvs
                                && flushed.iter().all(|w| w.status == WcStatus::ConnErr),
                            "{}: flushed {flushed:?}, {queued_recvs} queued",
                            ctx_msg()
                        );
                        queued_recvs = 0;
                        remote = None;
                    }
                    state = to;
                }
            }
            QpOp::Reset => {
                qp.reset();
                let flushed = drain(&cq, Opcode::Recv);
                ensure!(
                    flushed.len() == queued_recvs,
                    "{}: flushed {}",
                    ctx_msg(),
                    flushed.len()
                );
                queued_recvs = 0;
                state = QpState::Reset;
                remote = None;
                // The peers' receive sequence restarts with ours.
                for (p, _) in &peers {
                    p.reset();
                    p.connect(qp.endpoint()).unwrap();
                }
            }
            QpOp::Write => {
                let byte = (i % 251) as u8 + 1;
                mr.fill(byte);
                let (target, target_mr) = match remote {
                    Some(r) => (r, &peers[r].1),
                    None => (0, &peers[0].1),
                };
                qp.post_send(&WorkRequest::write(
                    i,
                    mr.sge(0, 64),
                    RemoteAddr {
                        rkey: target_mr.rkey(),
                        offset: 0,
                    },
                ))
                .map_err(|e| format!("{}: {e}", ctx_msg()))?;
                let wcs = drain(&cq, Opcode::RdmaWrite);
                ensure!(
                    wcs.len() == 1 && wcs[0].wr_id == i,
                    "{}: {wcs:?}",
                    ctx_msg()
                );
                if state == QpState::Rts {
                    ensure!(wcs[0].is_ok(), "{}: {wcs:?}", ctx_msg());
                    ensure!(
                        peers[target].1.snapshot() == vec![byte; 64],
                        "{}: write did not land",
                        ctx_msg()
                    );
                } else {
                    ensure!(wcs[0].status == WcStatus::ConnErr, "{}: {wcs:?}", ctx_msg());
                }
            }
            QpOp::Recv => {
                qp.post_recv(&WorkRequest::recv(i, mr.sge(0, 64)))
                    .map_err(|e| format!("{}: {e}", ctx_msg()))?;
                let wcs = drain(&cq, Opcode::Recv);
                if matches!(state, QpState::Init | QpState::Rtr | QpState::Rts) {
                    ensure!(wcs.is_empty(), "{}: {wcs:?}", ctx_msg());
                    queued_recvs += 1;
                } else {
                    ensure!(
                        wcs.len() == 1 && wcs[0].status == WcStatus::ConnErr,
                        "{}: {wcs:?}",
                        ctx_msg()
                    );
                }
            }
        }
        ensure!(
            qp.state() == state,
            "{}: state {} != model",
            ctx_msg(),
            qp.state()
        );
        ensure!(
            qp.posted_recvs() == queued_recvs,
            "{}: recv queue",
            ctx_msg()
        );
        ensure!(
            qp.remote() == remote.map(|r| peers[r].0.endpoint()),
            "{}: remote endpoint",
            ctx_msg()
        );
    }
    qp.close();
    ensure!(
        matches!(
            qp.modify_qp(QpState::Init, &ModifyParams::default()),
            Err(VerbsError::QpClosed(_))
        ),
        "seed {seed}: closed QP accepted a transition"
    );
    ensure!(fabric.psn_violations() == 0, "seed {seed}: psn violations");
    Ok(len)
}

/// Polls everything and keeps the completions of one opcode.
fn drain(cq: &CompletionQueue, opcode: Opcode) -> Vec<WorkCompletion> {
    cq.poll(usize::MAX)
        .into_iter()
        .filter(|w| w.opcode == opcode)
        .collect()
}

// ---- data-plane protection ----

struct Region {
    mr: MemoryRegion,
    shadow: Vec<u8>,
}

impl Region {
    fn new(pd: &ProtectionDomain, rng: &mut ChaCha8Rng) -> Self {
        let len = rng.random_range(16..512);
        let mr = pd
            .reg_mr(len, AccessFlags::from_bits(rng.random_range(0..8)))
            .unwrap();
        let shadow: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        mr.write(0, &shadow).unwrap();
        Self { mr, shadow }
    }

    fn lkey_ok(&self, sge: &Sge, need: AccessFlags) -> bool {
        sge.lkey == self.mr.lkey()
            && self.mr.contains(sge.offset, sge.length)
            && self.mr.access().contains(need)
    }
}

fn find(regions: &mut [Region], pred: impl Fn(&Region) -> bool) -> Option<&mut Region> {
    regions.iter_mut().find(|r| pred(r))
}

fn pick_key(rng: &mut ChaCha8Rng, own: &[Region], foreign: &[Region], remote: bool) -> u32 {
    let key = |r: &Region| if remote { r.mr.rkey() } else { r.mr.lkey() };
    match rng.random_range(0..10) {
        0..=6 => key(&own[rng.random_range(0..own.len())]),
        7..=8 => key(&foreign[rng.random_range(0..foreign.len())]),
        _ => rng.random(),
    }
}

fn pick_range(rng: &mut ChaCha8Rng, max: usize) -> (usize, usize) {
    let offset = rng.random_range(0..max + 64);
    let length = rng.random_range(1..160);
    (offset, length)
}

/// Random READ, WRITE and SEND requests between two users' QPs with keys
/// drawn from their own regions, a third user's regions, or thin air.
/// Every status is predicted from the keys, access flags and bounds alone,
/// and every region is compared to its shadow copy after each request.
pub fn data_plane_accesses(seed: u64, n: usize) -> Check<usize> {
    let mut rng = rng(seed);
    let fabric = Fabric::new(seed);
    let ha = fabric.add_host(HostConfig::default());
    let hb = fabric.add_host(HostConfig::default());
    let (ca, cb) = (open(&ha), open(&hb));
    let (pa, pb) = (ca.alloc_pd().unwrap(), cb.alloc_pd().unwrap());
    // A third user with regions on both hosts.
    let (fa, fb) = (ca.alloc_pd().unwrap(), cb.alloc_pd().unwrap());
    let cq_a = ca.create_cq(4096).unwrap();
    let cq_b = cb.create_cq(4096).unwrap();
    let qa = pa.create_qp(&cq_a).unwrap();
    let qb = pb.create_qp(&cq_b).unwrap();
    qa.connect(qb.endpoint()).unwrap();
    qb.connect(qa.endpoint()).unwrap();

    let mut a: Vec<Region> = (0..3).map(|_| Region::new(&pa, &mut rng)).collect();
    let mut b: Vec<Region> = (0..3).map(|_| Region::new(&pb, &mut rng)).collect();
    let mut foreign: Vec<Region> = (0..2).map(|_| Region::new(&fa, &mut rng)).collect();
    foreign.extend((0..2).map(|_| Region::new(&fb, &mut rng)));
    // A region both sides can always use for SEND and its receive.
    let spare = pb.reg_mr(512, AccessFlags::ALL).unwrap();
    let mut spare_shadow = spare.snapshot();

    fabric.enable_log();
    for i in 0..n as u64 {
        let op = rng.random_range(0..3);
        let (off, len) = pick_range(&mut rng, 512);
        let local = Sge {
            lkey: pick_key(&mut rng, &a, &foreign, false),
            offset: off,
            length: len,
        };
        let ctx_msg = format!("seed {seed} access {i} op {op}");
        match op {
            // RDMA_WRITE and RDMA_READ
            0 | 1 => {
                let (roff, _) = pick_range(&mut rng, 512);
                let remote = RemoteAddr {
                    rkey: pick_key(&mut rng, &b, &foreign, true),
                    offset: roff,
                };
                let write = op == 0;
                let need_local = if write {
                    AccessFlags::NONE
                } else {
                    AccessFlags::LOCAL_WRITE
                };
                let need_remote = if write {
                    AccessFlags::REMOTE_WRITE
                } else {
                    AccessFlags::REMOTE_READ
                };
                let wr = if write {
                    WorkRequest::write(i, local, remote)
                } else {
                    WorkRequest::read(i, local, remote)
                };
                let src_ok = a.iter().any(|r| r.lkey_ok(&local, need_local));
                let dst_ok = b.iter().any(|r| {
                    r.mr.rkey() == remote.rkey
                        && r.mr.contains(remote.offset, len)
                        && r.mr.access().contains(need_remote)
                });
                let expect = if src_ok && dst_ok {
                    WcStatus::Ok
                } else {
                    WcStatus::ProtectionErr
                };
                qa.post_send(&wr).map_err(|e| format!("{ctx_msg}: {e}"))?;
                let wcs = cq_a.poll(usize::MAX);
                ensure!(
                    wcs.len() == 1 && wcs[0].wr_id == i && wcs[0].status == expect,
                    "{ctx_msg}: expected {expect:?}, got {wcs:?}"
                );
                if expect == WcStatus::Ok {
                    let l = find(&mut a, |r| r.mr.lkey() == local.lkey).unwrap();
                    let r = find(&mut b, |r| r.mr.rkey() == remote.rkey).unwrap();
                    if write {
                        r.shadow[remote.offset..remote.offset + len]
                            .copy_from_slice(&l.shadow[off..off + len]);
                    } else {
                        l.shadow[off..off + len]
                            .copy_from_slice(&r.shadow[remote.offset..remote.offset + len]);
                    }
                }
            }
            // SEND into a receive posted by the other side
            _ => {
                let send_len = rng.random_range(1..128);
                let payload: Vec<u8> = (0..send_len).map(|_| rng.random()).collect();
                let scratch = pa.reg_mr(send_len, AccessFlags::NONE).unwrap();
                scratch.write(0, &payload).unwrap();
                let (roff, rlen) = pick_range(&mut rng, 512);
                let recv = Sge {
                    lkey: pick_key(&mut rng, &b, &foreign, false),
                    offset: roff,
                    length: rlen,
                };
                let recv_ok = b.iter().any(|r| r.lkey_ok(&recv, AccessFlags::LOCAL_WRITE));
                qb.post_recv(&WorkRequest::recv(i, recv))
                    .map_err(|e| format!("{ctx_msg}: {e}"))?;
                let early = cq_b.poll(usize::MAX);
                let (target, expect) = if recv_ok {
                    ensure!(
                        early.is_empty(),
                        "{ctx_msg}: valid receive completed early {early:?}"
                    );
                    let fits = send_len <= rlen;
                    (
                        recv,
                        if fits {
                            WcStatus::Ok
                        } else {
                            WcStatus::ProtectionErr
                        },
                    )
                } else {
                    ensure!(
                        early.len() == 1 && early[0].status == WcStatus::ProtectionErr,
                        "{ctx_msg}: bad receive gave {early:?}"
                    );
                    let fallback = spare.sge(0, 512);
                    qb.post_recv(&WorkRequest::recv(i, fallback)).unwrap();
                    (fallback, WcStatus::Ok)
                };
                qa.post_send(&WorkRequest::send(i, scratch.sge(0, send_len)))
                    .map_err(|e| format!("{ctx_msg}: {e}"))?;
                let sent = cq_a.poll(usize::MAX);
                let got = cq_b.poll(usize::MAX);
                ensure!(
                    sent.len() == 1
                        && sent[0].status == expect
                        && got.len() == 1
                        && got[0].status == expect,
                    "{ctx_msg}: expected {expect:?}, sender {sent:?}, receiver {got:?}"
                );
                pa.dereg_mr(&scratch);
                if expect == WcStatus::Ok {
                    let dst = if target.lkey == spare.lkey() {
                        &mut spare_shadow
                    } else {
                        &mut find(&mut b, |r| r.mr.lkey() == target.lkey).unwrap().shadow
                    };
                    dst[target.offset..target.offset + send_len].copy_from_slice(&payload);
                }
            }
        }
        for r in a.iter().chain(&b).chain(&foreign) {
            ensure!(
                r.mr.snapshot() == r.shadow,
                "{ctx_msg}: region {} diverged",
                r.mr.id()
            );
        }
        ensure!(
            spare.snapshot() == spare_shadow,
            "{ctx_msg}: spare region diverged"
        );
    }
    // Requests from A reached B in posting order.
    let psns: Vec<u32> = fabric
        .log_records()
        .iter()
        .filter(|l| l.src == qa.endpoint())
        .map(|l| l.psn)
        .collect();
    ensure!(
        psns.windows(2).all(|w| w[0] < w[1]),
        "seed {seed}: out of order {psns:?}"
    );
    ensure!(fabric.psn_violations() == 0, "seed {seed}: psn violations");
    Ok(n)
}

// ---- copy-on-fork ----

pub struct World {
    pub costs: CostModel,
    pub procs: ProcessTable,
    pub parent: Pid,
    pub pd: ProtectionDomain,
    pub cq: CompletionQueue,
    pub peer_pd: ProtectionDomain,
    pub peer_cq: CompletionQueue,
    _hosts: (Arc<Host>, Arc<Host>),
}

/// A parent process on one host holding a full-size region, and a peer
/// host to talk to.
pub fn world(seed: u64) -> World {
    let fabric = Fabric::new(seed);
    let a = fabric.add_host(HostConfig::default());
    let b = fabric.add_host(HostConfig::default());
    let ctx = open(&a);
    let pd = ctx.alloc_pd().unwrap();
    let cq = ctx.create_cq(1 << 16).unwrap();
    let peer = open(&b);
    let peer_pd = peer.alloc_pd().unwrap();
    let peer_cq = peer.create_cq(1 << 16).unwrap();
    let mut procs = ProcessTable::new(1);
    let parent = procs.spawn(Some(RdmaView {
        ctx: ctx.clone(),
        pd: pd.clone(),
    }));
    let mr = pd.reg_mr(FUNCTION_MR_BYTES, AccessFlags::ALL).unwrap();
    mr.fill(0xAA);
    procs.get_mut(parent).unwrap().mrs.push(mr);
    World {
        costs: CostModel::default(),
        procs,
        parent,
        pd,
        cq,
        peer_pd,
        peer_cq,
        _hosts: (a, b),
    }
}

impl World {
    /// A connected (local, peer) QP pair.
    pub fn link(&self) -> (QueuePair, QueuePair) {
        let local = self.pd.create_qp(&self.cq).unwrap();
        let remote = self.peer_pd.create_qp(&self.peer_cq).unwrap();
        local.connect(remote.endpoint()).unwrap();
        remote.connect(local.endpoint()).unwrap();
        (local, remote)
    }

    pub fn mr(&self, pid: Pid) -> MemoryRegion {
        self.procs.get(pid).unwrap().mrs[0].clone()
    }
}

/// Parent and children each own a QP; the peer sends and writes into one
/// of them at random. Whoever was not targeted must stay byte-identical.
pub fn isolation_schedule(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut w = world(seed);
    let t = Timeline::starting_at(Duration::ZERO);
    let mut pids = vec![w.parent];
    for _ in 0..rng.random_range(1..4) {
        pids.push(w.procs.fork_process(w.parent, &w.costs, &t).unwrap());
    }
    let links: Vec<_> = pids.iter().map(|_| w.link()).collect();
    let peer_mr = w.peer_pd.reg_mr(4096, AccessFlags::ALL).unwrap();
    for step in 0..20u64 {
        let target = rng.random_range(0..pids.len());
        let before: Vec<Vec<u8>> = pids.iter().map(|p| w.mr(*p).snapshot()).collect();
        let len = rng.random_range(1..512);
        let off = rng.random_range(0..FUNCTION_MR_BYTES - len);
        let byte = rng.random::<u8>();
        peer_mr.write(0, &vec![byte; len]).unwrap();
        let (local, remote) = &links[target];
        let dst = w.mr(pids[target]);
        if rng.random_bool(0.5) {
            local
                .post_recv(&WorkRequest::recv(step, dst.sge(off, len)))
                .unwrap();
            remote
                .post_send(&WorkRequest::send(step, peer_mr.sge(0, len)))
                .unwrap();
        } else {
            remote
                .post_send(&WorkRequest::write(
                    step,
                    peer_mr.sge(0, len),
                    RemoteAddr {
                        rkey: dst.rkey(),
                        offset: off,
                    },
                ))
                .unwrap();
        }
        for (i, p) in pids.iter().enumerate() {
            let now = w.mr(*p).snapshot();
            if i == target {
                ensure!(
                    now[off..off + len] == vec![byte; len][..],
                    "seed {seed} step {step}: pid {p} missed its own transfer"
                );
            } else {
                ensure!(
                    now == before[i],
                    "seed {seed} step {step}: pid {p} corrupted"
                );
            }
        }
    }
    Ok(())
}

/// Surcharge a fork of the RDMA-holding parent pays, in microseconds.
pub fn measured_fork_surcharge() -> f64 {
    let mut w = world(1);
    let plain = w.procs.spawn(None);
    let with = Timeline::starting_at(Duration::ZERO);
    w.procs.fork_process(w.parent, &w.costs, &with).unwrap();
    let without = Timeline::starting_at(Duration::ZERO);
    w.procs.fork_process(plain, &w.costs, &without).unwrap();
    (with.elapsed() - without.elapsed()).as_secs_f64() * 1e6
}

// ---- QP selection ----

/// Brute-force reference: scan everything, filter, sort by index.
pub fn reference_select(entries: &[Assignment], dest: Gid, count: usize) -> Option<Vec<usize>> {
    let mut matching: Vec<usize> = Vec::new();
    let mut other: Vec<usize> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.pid.is_some() {
            continue;
        }
        if e.destination == Some(dest) {
            matching.push(i);
        } else {
            other.push(i);
        }
    }
    matching.sort_unstable();
    other.sort_unstable();
    let mut out: Vec<usize> = matching.into_iter().take(count).collect();
    let need = count - out.len();
    out.extend(other.into_iter().take(need));
    (out.len() == count).then_some(out)
}

/// One random table state, destination and count.
pub fn selector_trial(rng: &mut ChaCha8Rng) -> Check {
    let gids: Vec<Gid> = (0..3).map(|h| Gid::for_device(h, 0)).collect();
    let n = rng.random_range(0..24);
    let entries: Vec<Assignment> = (0..n)
        .map(|_| Assignment {
            pid: rng.random_bool(0.4).then(|| rng.random_range(1..6)),
            destination: match rng.random_range(0..4) {
                3 => None,
                i => Some(gids[i]),
            },
        })
        .collect();
    let dest = gids[rng.random_range(0..3)];
    let count = rng.random_range(1..6);
    let (got, want) = (
        select(&entries, dest, count),
        reference_select(&entries, dest, count),
    );
    ensure!(
        got == want,
        "{entries:?} dest {dest} count {count}: {got:?} != {want:?}"
    );
    Ok(())
}

// ---- pipelining ----

/// A warm start with random runtime init and kernel open_device costs.
pub fn pipelining_pair(rng: &mut ChaCha8Rng) -> Check {
    let mut cfg = ScenarioConfig::default();
    cfg.costs.runtime_init = rng.random_range(0..20_000) as f64;
    let open = rng.random_range(0..30_000) as f64;
    cfg.costs.kernel.insert("open_device".into(), open);
    let mut o = Orchestrator::new(cfg.clone(), Scheme::Swift, 1).map_err(|e| e.to_string())?;
    let spec = RequestSpec::new("a", "noop", LatencyClass::Normal);
    o.handle_request(&spec).map_err(|e| e.to_string())?;
    let t = o.handle_request(&spec).map_err(|e| e.to_string())?.timing;
    let (a, b) = (t.runtime_init, t.rdma_setup);
    ensure!(
        a == cfg.costs.runtime_init,
        "runtime init {a} != {}",
        cfg.costs.runtime_init
    );
    ensure!(
        t.init_elapsed == a.max(b),
        "init took {} for a={a} b={b}",
        t.init_elapsed
    );
    ensure!(
        t.visible_control_plane == (b - a).max(0.0),
        "visible {} for a={a} b={b}",
        t.visible_control_plane
    );
    ensure!(conserved(&t), "{t:?} does not add up");
    Ok(())
}

// ---- orchestrator schedules ----

/// Random requests, clock advances and terminations for three users and
/// two destinations. Invariants are checked after every step; returns the
/// number of steps.
pub fn orchestrator_schedule(seed: u64, scheme: Scheme, steps: usize) -> Check<usize> {
    let mut rng = rng(seed);
    let mut o =
        Orchestrator::new(ScenarioConfig::default(), scheme, seed).map_err(|e| e.to_string())?;
    let dests = [
        o.default_destination(),
        o.add_server().map_err(|e| e.to_string())?,
    ];
    for i in 0..steps {
        match rng.random_range(0..9) {
            0..=5 => {
                let class = if rng.random_bool(0.5) {
                    LatencyClass::Fast
                } else {
                    LatencyClass::Normal
                };
                let user = format!("u{}", rng.random_range(0..3));
                let spec = RequestSpec::new(&user, "noop", class).to(dests[rng.random_range(0..2)]);
                let at = o.now();
                let out = o
                    .handle_request_at(&spec, at)
                    .map_err(|e| format!("seed {seed} step {i}: {e}"))?;
                ensure!(
                    conserved(&out.timing),
                    "seed {seed} step {i}: {:?}",
                    out.timing
                );
                let owner = &o.table().get(out.container).unwrap().user;
                ensure!(
                    *owner == user,
                    "seed {seed} step {i}: {user} served by {owner}'s container"
                );
            }
            6..=7 => o.clock().advance(micros(rng.random_range(0..5_000) as f64)),
            _ => {
                let user = format!("u{}", rng.random_range(0..3));
                if let Some(id) = o.container_of(&user, "noop") {
                    let tag = o.container_tag(id).unwrap().to_owned();
                    o.terminate_container(id).map_err(|e| e.to_string())?;
                    let left = o.fabric().qps_tagged(&tag);
                    ensure!(
                        left.is_empty(),
                        "seed {seed} step {i}: {} QPs survive termination",
                        left.len()
                    );
                }
            }
        }
        let bad = o.check_invariants();
        ensure!(bad.is_empty(), "seed {seed} step {i}: {bad:?}");
    }
    Ok(steps)
}

// ---- data-plane ordering ----

/// Swift against kernel-mediated for every op, mode and thread count, plus
/// the zero-penalty equivalence. Returns the number of runs compared.
pub fn data_plane_ordering(duration: Duration) -> Check<usize> {
    use elastic_rdma::harness::{run_data_plane, DataOp, DataPlaneParams, Mode, ThreadStats};
    let run = |cfg: &ScenarioConfig, scheme, op, mode, threads| -> Check<Vec<ThreadStats>> {
        let p = DataPlaneParams {
            op,
            mode,
            threads,
            duration,
            ..DataPlaneParams::default()
        };
        run_data_plane(cfg, scheme, &p, 1)
            .map(|r| r.threads)
            .map_err(|e| e.to_string())
    };
    let total = |s: &[ThreadStats]| s.iter().map(|t| t.ops).sum::<u64>();
    let worst = |s: &[ThreadStats]| s.iter().map(|t| t.mean_latency_us).fold(0.0, f64::max);
    let cfg = ScenarioConfig::default();
    let mut free = cfg.clone();
    free.costs.syscall_penalty = 0.0;
    let mut runs = 0;
    for op in DataOp::ALL {
        for mode in Mode::ALL {
            let mut last_async = (0, 0);
            for threads in [1, 2, 4, 8] {
                let s = run(&cfg, Scheme::Swift, op, mode, threads)?;
                let k = run(&cfg, Scheme::KernelMediated, op, mode, threads)?;
                let at = format!("{op}/{mode}/t{threads}");
                ensure!(
                    total(&s) >= total(&k),
                    "{at}: throughput {} < {}",
                    total(&s),
                    total(&k)
                );
                ensure!(
                    worst(&s) <= worst(&k),
                    "{at}: latency {} > {}",
                    worst(&s),
                    worst(&k)
                );
                if mode == Mode::Async {
                    let now = (total(&s), total(&k));
                    ensure!(
                        now.0 >= last_async.0 && now.1 >= last_async.1,
                        "{at}: async throughput fell with more threads"
                    );
                    last_async = now;
                }
                let sf = run(&free, Scheme::Swift, op, mode, threads)?;
                let kf = run(&free, Scheme::KernelMediated, op, mode, threads)?;
                ensure!(
                    sf == kf,
                    "{at}: zero penalty still differs: {sf:?} vs {kf:?}"
                );
                runs += 4;
            }
        }
    }
    Ok(runs)
}
