//! Hosting partitions on nodes: placement, faults and the drivers that run
//! partition runtimes either in virtual time or on real threads.

mod placement;
mod realtime;
mod recorder;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstanceBody, InstanceId};
use crate::partition::RuntimeError;
use crate::speculation::SpeculationMode;
use crate::workloads::Workload;

pub use placement::{rebalance, Move, PlacementMap};
pub use realtime::{run_realtime, RealtimeOutput};
pub use recorder::Recorder;
pub use sim::{run_simulation, RequestMetrics, SimOutput};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("partition {partition}: {source}")]
    Runtime { partition: u32, source: RuntimeError },
}

/// Simulated service times, in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub task_min_us: u64,
    pub task_max_us: u64,
    pub step_us: u64,
    pub flush_us: u64,
    pub hop_us: u64,
    pub restart_min_us: u64,
    pub restart_max_us: u64,
    pub move_us: u64,
}

impl Default for Costs {
    fn default() -> Self {
        Self {
            task_min_us: 1_000,
            task_max_us: 5_000,
            step_us: 100,
            flush_us: 2_000,
            hop_us: 1_000,
            restart_min_us: 20_000,
            restart_max_us: 50_000,
            move_us: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FaultPlan {
    None,
    /// Crash `node` at each virtual time; it restarts after the usual delay.
    Scripted(Vec<(u64, u32)>),
    /// After every processed event, crash a random live node with this
    /// probability, up to `until` × duration.
    Random { probability: f64, until: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRequest {
    pub at_us: u64,
    pub target: InstanceId,
    pub body: InstanceBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Load {
    /// Poisson arrivals of `requests` orchestrations at `rate` per second.
    Open { requests: u64, rate: f64 },
    /// `clients` loops, each starting a new orchestration when the last one
    /// completes, until the duration ends.
    Closed { clients: u32 },
    Scripted(Vec<ScriptedRequest>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub nodes: u32,
    /// Nodes that host partitions at time zero; the rest join at the
    /// rebalance.
    pub start_nodes: u32,
    pub partitions: u32,
    pub mode: SpeculationMode,
    pub workload: Workload,
    pub load: Load,
    pub duration_us: u64,
    /// Hard stop when the run does not settle.
    pub max_time_us: u64,
    pub faults: FaultPlan,
    pub rebalance_at_us: Option<u64>,
    pub cores_per_node: u32,
    pub cache_budget: Option<usize>,
    pub checkpoint_events: u64,
    pub costs: Costs,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            nodes: 4,
            start_nodes: 4,
            partitions: 32,
            mode: SpeculationMode::Conservative,
            workload: Workload::HelloSeq,
            load: Load::Open { requests: 100, rate: 100.0 },
            duration_us: 2_000_000,
            max_time_us: 120_000_000,
            faults: FaultPlan::None,
            rebalance_at_us: None,
            cores_per_node: 4,
            cache_budget: None,
            checkpoint_events: 256,
            costs: Costs::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::ConfigInvalid(m.to_string()));
        if self.partitions == 0 {
            return bad("partitions must be positive");
        }
        if self.nodes == 0 || self.start_nodes == 0 || self.start_nodes > self.nodes {
            return bad("need 1 <= start_nodes <= nodes");
        }
        if self.cores_per_node == 0 {
            return bad("cores_per_node must be positive");
        }
        if self.costs.task_min_us > self.costs.task_max_us || self.costs.restart_min_us > self.costs.restart_max_us {
            return bad("cost ranges are inverted");
        }
        if self.max_time_us < self.duration_us {
            return bad("max_time must not be shorter than duration");
        }
        match &self.load {
            Load::Open { rate, requests } if *rate <= 0.0 || *requests == 0 => bad("open load needs positive rate and requests"),
            Load::Closed { clients: 0 } => bad("closed load needs clients"),
            _ => match self.faults {
                FaultPlan::Random { probability, until } if !(0.0..=1.0).contains(&probability) || !(0.0..=1.0).contains(&until) => {
                    bad("fault probability and horizon must be within [0, 1]")
                }
                _ => Ok(()),
            },
        }
    }
}
