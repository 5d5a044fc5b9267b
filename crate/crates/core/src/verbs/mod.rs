//! A verbs-style RDMA control and data plane over an in-process fabric.
//!
//! Control-plane entry points run their internal subroutine chain through a
//! [`CacheDispatch`](crate::cache::CacheDispatch) and charge the kernel-space
//! share on top; data-plane posts charge a per-operation cost and complete
//! after the configured NIC latency.

mod device;
mod fabric;
mod gid;
mod host;
mod qp;
mod wr;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use device::{CompletionQueue, DeviceContext, MemoryRegion, ProtectionDomain};
pub use fabric::{AcceptInfo, Endpoint, Fabric, LogRecord, ServerConfig};
pub use gid::{Gid, GidParseError};
pub use host::{CpuModel, DeviceId, Host, HostConfig, HostEnv};
pub use qp::{ModifyParams, QueuePair, RemoteEndpoint};
pub use wr::{Opcode, RemoteAddr, Sge, WcStatus, WorkCompletion, WorkRequest};

use crate::cache::CacheError;

/// Default depth of send, receive and completion queues.
pub const DEFAULT_QUEUE_DEPTH: usize = 128;

/// Size of the memory region pre-registered for every function.
pub const FUNCTION_MR_BYTES: usize = 32 * 1024;

#[derive(Debug, Error)]
pub enum VerbsError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device context {0} is closed")]
    ContextClosed(u64),
    #[error("memory region length must be > 0")]
    ZeroLengthMr,
    #[error("queue depth must be > 0")]
    ZeroDepth,
    #[error("illegal QP transition {from} -> {to}")]
    IllegalTransition { from: QpState, to: QpState },
    #[error("RTR requires the remote gid and QP number")]
    MissingRemote,
    #[error("remote endpoint {0} is not registered on the fabric")]
    PeerUnreachable(RemoteEndpoint),
    #[error("QP {0} has been closed")]
    QpClosed(u32),
    #[error("{queue} queue of QP {qpn} is full (depth {depth})")]
    QueueFull {
        qpn: u32,
        queue: &'static str,
        depth: usize,
    },
    #[error("opcode {0:?} cannot be posted on this queue")]
    WrongQueue(Opcode),
    #[error("resources belong to different protection domains")]
    ForeignResource,
    #[error("access outside memory region [0, {len}): offset {offset} length {length}")]
    OutOfBounds {
        offset: usize,
        length: usize,
        len: usize,
    },
    #[error("no server listening at {0}")]
    NoListener(Gid),
    #[error("injected failure in {0}")]
    Injected(&'static str),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// RC queue pair states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
    Error,
}

impl QpState {
    /// Whether `self -> to` is an edge of the RC state machine.
    pub fn can_transition(self, to: QpState) -> bool {
        use QpState::*;
        matches!(
            (self, to),
            (Reset, Init) | (Init, Rtr) | (Rtr, Rts) | (_, Error)
        )
    }

    /// RTR or RTS: the remote endpoint is known.
    pub fn is_connected(self) -> bool {
        matches!(self, QpState::Rtr | QpState::Rts)
    }
}

impl fmt::Display for QpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QpState::Reset => "RESET",
            QpState::Init => "INIT",
            QpState::Rtr => "RTR",
            QpState::Rts => "RTS",
            QpState::Error => "ERROR",
        };
        f.write_str(s)
    }
}

/// Memory region access permissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct AccessFlags(u8);

impl AccessFlags {
    pub const LOCAL_WRITE: AccessFlags = AccessFlags(1);
    pub const REMOTE_READ: AccessFlags = AccessFlags(2);
    pub const REMOTE_WRITE: AccessFlags = AccessFlags(4);
    pub const NONE: AccessFlags = AccessFlags(0);
    pub const ALL: AccessFlags = AccessFlags(7);

    pub fn contains(self, other: AccessFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        AccessFlags(bits & 7)
    }
}

impl std::ops::BitOr for AccessFlags {
    type Output = AccessFlags;
    fn bitor(self, rhs: AccessFlags) -> AccessFlags {
        AccessFlags(self.0 | rhs.0)
    }
}

/// The control-plane entry points a profiler may exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Api {
    GetDeviceList,
    OpenDevice,
    AllocPd,
    RegMr,
    CreateQp,
    ModifyQp,
}

impl Api {
    pub const ALL: [Api; 6] = [
        Api::GetDeviceList,
        Api::OpenDevice,
        Api::AllocPd,
        Api::RegMr,
        Api::CreateQp,
        Api::ModifyQp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Api::GetDeviceList => "get_device_list",
            Api::OpenDevice => "open_device",
            Api::AllocPd => "alloc_pd",
            Api::RegMr => "reg_mr",
            Api::CreateQp => "create_qp",
            Api::ModifyQp => "modify_qp",
        }
    }
}
