//! Durable serverless workflow engine with a deterministic simulator.

pub mod cluster;
pub mod config;
pub mod metrics;
pub mod model;
pub mod orchestration;
pub mod partition;
pub mod speculation;
pub mod storage;
pub mod sweep;
pub mod transport;
pub mod workloads;
