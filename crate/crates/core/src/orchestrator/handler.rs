use std::sync::Arc;

use crate::clock::Timeline;
use crate::verbs::{
    Gid, MemoryRegion, ProtectionDomain, QueuePair, RemoteAddr, WcStatus, WorkCompletion,
    WorkRequest,
};

use super::config::BuiltinHandler;

/// The request as a handler sees it.
#[derive(Debug, Clone)]
pub struct Event {
    pub user: String,
    pub function: String,
    pub payload: Vec<u8>,
}

/// Resources handed to a handler. Empty for schemes without RDMA.
#[derive(Debug, Clone)]
pub struct FunctionContext {
    pub pd: Option<ProtectionDomain>,
    /// The pre-registered 32KB region.
    pub mr: Option<MemoryRegion>,
    pub qps: Vec<QueuePair>,
    /// QP ids, parallel to `qps`.
    pub qp_ids: Vec<usize>,
    pub destination: Gid,
    /// rkey and length of the destination's key-value region.
    pub kv: Option<(u32, usize)>,
    /// Data-exchange time is charged here.
    pub timeline: Timeline,
}

pub type HandlerFn =
    Arc<dyn Fn(&Event, &mut FunctionContext) -> Result<Vec<u8>, String> + Send + Sync>;

pub fn builtin(kind: BuiltinHandler) -> HandlerFn {
    match kind {
        BuiltinHandler::Noop => Arc::new(|_, _| Ok(Vec::new())),
        BuiltinHandler::Echo => Arc::new(echo),
        BuiltinHandler::KvRead => Arc::new(kv_read),
    }
}

fn wait_for(
    qp: &QueuePair,
    timeline: &Timeline,
    wr_id: u64,
    recv: bool,
) -> Result<WorkCompletion, String> {
    let cq = if recv { qp.recv_cq() } else { qp.send_cq() };
    loop {
        let batch = cq.poll(1);
        let Some(wc) = batch.into_iter().next() else {
            return Err(format!("no completion for wr {wr_id}"));
        };
        if wc.wr_id == wr_id && wc.qpn == qp.qpn() {
            timeline.advance_to(wc.completed_at);
            if wc.status != WcStatus::Ok {
                return Err(format!("wr {wr_id} failed: {:?}", wc.status));
            }
            return Ok(wc);
        }
    }
}

/// Sends the payload over the first QP and returns what comes back.
fn echo(event: &Event, ctx: &mut FunctionContext) -> Result<Vec<u8>, String> {
    let (Some(qp), Some(mr)) = (ctx.qps.first(), ctx.mr.as_ref()) else {
        return Ok(event.payload.clone());
    };
    let half = mr.len() / 2;
    let n = event.payload.len();
    if n > half {
        return Err(format!("payload of {n} bytes exceeds {half}"));
    }
    qp.bind_timeline(ctx.timeline.clone());
    mr.write(0, &event.payload).map_err(|e| e.to_string())?;
    qp.post_recv(&WorkRequest::recv(2, mr.sge(half, half)))
        .map_err(|e| e.to_string())?;
    qp.post_send(&WorkRequest::send(1, mr.sge(0, n)))
        .map_err(|e| e.to_string())?;
    wait_for(qp, &ctx.timeline, 1, false)?;
    let wc = wait_for(qp, &ctx.timeline, 2, true)?;
    mr.read(half, wc.byte_len).map_err(|e| e.to_string())
}

/// Reads `payload.len()` bytes (at least 8) from the start of the
/// destination's key-value region.
fn kv_read(event: &Event, ctx: &mut FunctionContext) -> Result<Vec<u8>, String> {
    let (Some(qp), Some(mr)) = (ctx.qps.first(), ctx.mr.as_ref()) else {
        return Ok(Vec::new());
    };
    let (rkey, kv_len) = ctx.kv.ok_or("destination has no key-value region")?;
    let n = event.payload.len().max(8).min(kv_len).min(mr.len());
    qp.bind_timeline(ctx.timeline.clone());
    qp.post_send(&WorkRequest::read(
        3,
        mr.sge(0, n),
        RemoteAddr { rkey, offset: 0 },
    ))
    .map_err(|e| e.to_string())?;
    wait_for(qp, &ctx.timeline, 3, false)?;
    mr.read(0, n).map_err(|e| e.to_string())
}
