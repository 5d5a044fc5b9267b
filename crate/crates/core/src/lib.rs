//! Simulated RDMA control plane for elastic computing.

pub mod cache;
pub mod clock;
pub mod cost;
pub mod fork;
pub mod harness;
pub mod orchestrator;
pub mod verbs;
