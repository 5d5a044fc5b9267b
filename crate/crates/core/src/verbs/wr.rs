use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Opcode {
    Send,
    Recv,
    RdmaRead,
    RdmaWrite,
}

/// Scatter/gather element: a byte range of a local MR named by its lkey.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sge {
    pub lkey: u32,
    pub offset: usize,
    pub length: usize,
}

/// Target of a one-sided operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteAddr {
    pub rkey: u32,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub opcode: Opcode,
    pub local: Sge,
    pub remote: Option<RemoteAddr>,
}

impl WorkRequest {
    pub fn send(wr_id: u64, local: Sge) -> Self {
        Self {
            wr_id,
            opcode: Opcode::Send,
            local,
            remote: None,
        }
    }

    pub fn recv(wr_id: u64, local: Sge) -> Self {
        Self {
            wr_id,
            opcode: Opcode::Recv,
            local,
            remote: None,
        }
    }

    pub fn read(wr_id: u64, local: Sge, remote: RemoteAddr) -> Self {
        Self {
            wr_id,
            opcode: Opcode::RdmaRead,
            local,
            remote: Some(remote),
        }
    }

    pub fn write(wr_id: u64, local: Sge, remote: RemoteAddr) -> Self {
        Self {
            wr_id,
            opcode: Opcode::RdmaWrite,
            local,
            remote: Some(remote),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WcStatus {
    Ok,
    ProtectionErr,
    ConnErr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkCompletion {
    pub wr_id: u64,
    pub qpn: u32,
    pub opcode: Opcode,
    pub status: WcStatus,
    pub byte_len: usize,
    /// Virtual instant at which the hardware finished the request.
    pub completed_at: Duration,
}

impl WorkCompletion {
    pub fn is_ok(&self) -> bool {
        self.status == WcStatus::Ok
    }
}
