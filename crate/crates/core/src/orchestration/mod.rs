//! Record/replay orchestrations and serialized entities.
//!
//! An orchestration body is ordinary Rust code written against
//! [`OrchestrationContext`]. Each step re-runs the body from the top; calls
//! already present in the history are matched and their recorded results
//! reused, and the body suspends at the first await whose result is missing.

mod context;
mod entity;
mod registry;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstanceBody, InstanceId, Message, Payload};

pub use context::{CallHandle, Interrupt, LockToken, OrchestrationContext};
pub use entity::{
    execute_entity_step, EntityDefinition, EntityLock, EntityOpContext, EntityOpFn, EntityRuntimeState,
    PendingRequest,
};
pub use registry::{ActivityFn, InstanceKind, Registry};

/// Operation name used for lock requests in the history.
pub const LOCK_OP: &str = "__lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistoryEventKind {
    ExecutionStarted { orchestration_name: String, input: Payload },
    TaskScheduled { task_id: u64, task_name: String, input: Payload },
    TaskCompleted { task_id: u64, result: Payload },
    EntityOpScheduled { op_id: u64, target: InstanceId, op_name: String, input: Payload },
    EntityOpCompleted { op_id: u64, result: Payload },
    LocksAcquired { lock_id: u64, targets: Vec<InstanceId> },
    LocksReleased { lock_id: u64 },
    ExecutionCompleted { result: Payload },
}

impl HistoryEventKind {
    /// Events produced by the body itself, matched in order during replay.
    pub fn is_scheduling(&self) -> bool {
        matches!(
            self,
            HistoryEventKind::TaskScheduled { .. }
                | HistoryEventKind::EntityOpScheduled { .. }
                | HistoryEventKind::LocksAcquired { .. }
                | HistoryEventKind::LocksReleased { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub seq: u64,
    pub kind: HistoryEventKind,
}

pub type WorkflowFn = dyn Fn(&mut OrchestrationContext<'_>) -> Result<Payload, Interrupt> + Send + Sync;

#[derive(Clone)]
pub struct WorkflowDefinition {
    pub name: String,
    pub body: std::sync::Arc<WorkflowFn>,
}

impl WorkflowDefinition {
    pub fn new(
        name: impl Into<String>,
        body: impl Fn(&mut OrchestrationContext<'_>) -> Result<Payload, Interrupt> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), body: std::sync::Arc::new(body) }
    }
}

impl std::fmt::Debug for WorkflowDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkflowDefinition").field("name", &self.name).finish_non_exhaustive()
    }
}

/// A message an instance wants delivered to another instance. Identities are
/// assigned later by the owning partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutgoingMessage {
    pub target: InstanceId,
    pub body: InstanceBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_id: u64,
    pub task_name: String,
    pub input: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Running,
    Completed { result: Payload },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub new_history_events: Vec<HistoryEvent>,
    pub produced_messages: Vec<OutgoingMessage>,
    pub produced_tasks: Vec<TaskRequest>,
    pub status: StepStatus,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum OrchestrationError {
    #[error("nondeterminism at history position {position}: recorded {expected}, replay issued {actual}")]
    NondeterminismDetected { position: usize, expected: String, actual: String },
    #[error("corrupt history: {0}")]
    HistoryCorrupt(String),
    #[error("lock requested while already holding lock {0}")]
    NestedLock(u64),
    #[error("history length {len} exceeds limit {max}")]
    HistoryTooLong { len: usize, max: usize },
    #[error("instance received messages before being started")]
    NotStarted,
    #[error("orchestration body failed: {0}")]
    Failed(String),
}

/// Checks the structural invariants of a recorded history.
pub fn validate_history(history: &[HistoryEvent]) -> Result<(), OrchestrationError> {
    let corrupt = |m: String| Err(OrchestrationError::HistoryCorrupt(m));
    let mut scheduled = BTreeSet::new();
    for (i, e) in history.iter().enumerate() {
        if e.seq != i as u64 {
            return corrupt(format!("event {i} carries seq {}", e.seq));
        }
        match &e.kind {
            HistoryEventKind::ExecutionStarted { .. } if i != 0 => {
                return corrupt(format!("ExecutionStarted at position {i}"));
            }
            _ if i == 0 && !matches!(e.kind, HistoryEventKind::ExecutionStarted { .. }) => {
                return corrupt("history does not begin with ExecutionStarted".into());
            }
            HistoryEventKind::ExecutionCompleted { .. } if i + 1 != history.len() => {
                return corrupt("ExecutionCompleted is not last".into());
            }
            HistoryEventKind::TaskScheduled { task_id: id, .. }
            | HistoryEventKind::EntityOpScheduled { op_id: id, .. } => {
                if !scheduled.insert(*id) {
                    return corrupt(format!("call id {id} scheduled twice"));
                }
            }
            HistoryEventKind::TaskCompleted { task_id: id, .. }
            | HistoryEventKind::EntityOpCompleted { op_id: id, .. }
                if !scheduled.contains(id) =>
            {
                return corrupt(format!("completion for unscheduled call {id}"));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Folds arrivals into history, replays the body and resumes it until it
/// blocks or completes.
pub fn execute_orchestration_step(
    def: &WorkflowDefinition,
    instance: &InstanceId,
    history: &[HistoryEvent],
    arrivals: &[Message],
    max_history: usize,
) -> Result<StepOutcome, OrchestrationError> {
    validate_history(history)?;
    let done = |result: &Payload| StepOutcome {
        new_history_events: vec![],
        produced_messages: vec![],
        produced_tasks: vec![],
        status: StepStatus::Completed { result: result.clone() },
    };
    if let Some(HistoryEvent { kind: HistoryEventKind::ExecutionCompleted { result }, .. }) = history.last() {
        return Ok(done(result));
    }

    let mut scheduled = BTreeSet::new();
    let mut completed = BTreeSet::new();
    for e in history {
        match &e.kind {
            HistoryEventKind::TaskScheduled { task_id: id, .. }
            | HistoryEventKind::EntityOpScheduled { op_id: id, .. } => {
                scheduled.insert(*id);
            }
            HistoryEventKind::TaskCompleted { task_id: id, .. }
            | HistoryEventKind::EntityOpCompleted { op_id: id, .. } => {
                completed.insert(*id);
            }
            _ => {}
        }
    }

    let mut started = !history.is_empty();
    let mut arrived = Vec::new();
    for m in arrivals {
        let kind = match m.body() {
            Some(InstanceBody::Start { orchestration, input }) if !started => {
                started = true;
                HistoryEventKind::ExecutionStarted { orchestration_name: orchestration.clone(), input: input.clone() }
            }
            Some(InstanceBody::TaskResult { call_id, result }) => {
                if !scheduled.contains(call_id) || !completed.insert(*call_id) {
                    continue;
                }
                HistoryEventKind::TaskCompleted { task_id: *call_id, result: result.clone() }
            }
            Some(InstanceBody::EntityResult { op_id, result }) => {
                if !scheduled.contains(op_id) || !completed.insert(*op_id) {
                    continue;
                }
                HistoryEventKind::EntityOpCompleted { op_id: *op_id, result: result.clone() }
            }
            Some(InstanceBody::LockGranted { op_id }) => {
                if !scheduled.contains(op_id) || !completed.insert(*op_id) {
                    continue;
                }
                HistoryEventKind::EntityOpCompleted { op_id: *op_id, result: Payload::new() }
            }
            _ => continue,
        };
        arrived.push(kind);
    }
    if !started {
        return Err(OrchestrationError::NotStarted);
    }

    let full: Vec<&HistoryEventKind> = history.iter().map(|e| &e.kind).chain(arrived.iter()).collect();
    let mut ctx = OrchestrationContext::new(instance, &full, history.len());
    let result = (def.body)(&mut ctx);
    let (mut new_events, messages, tasks, status) = ctx.finish(result)?;

    let mut events: Vec<HistoryEventKind> = arrived;
    events.append(&mut new_events);
    let total = history.len() + events.len();
    if total > max_history {
        return Err(OrchestrationError::HistoryTooLong { len: total, max: max_history });
    }
    let new_history_events = events
        .into_iter()
        .enumerate()
        .map(|(i, kind)| HistoryEvent { seq: (history.len() + i) as u64, kind })
        .collect();
    Ok(StepOutcome { new_history_events, produced_messages: messages, produced_tasks: tasks, status })
}
