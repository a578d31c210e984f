//! Computation-model vocabulary: instances, messages, work items and the
//! fault-augmented execution graph, plus the checkers for the
//! causally-consistent-commit guarantee.

mod check;
mod graph;
pub mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{
    CccReport, CccViolation, ConsistencyLevel, ConsistencyReport, ConsistencyViolation,
    ViolationKind,
};
pub use graph::{ExecutionGraph, ExecutionVertex, VertexId, VertexKind};

/// Opaque payload. Built-in workloads use a plain text encoding.
pub type Payload = String;

/// Identity of a stateful instance: a (name, key) pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId {
    pub name: String,
    pub key: String,
}

impl InstanceId {
    /// Panics if either part is empty; use [`InstanceId::try_new`] for input
    /// that has not been validated.
    pub fn new(name: impl Into<String>, key: impl Into<String>) -> Self {
        Self::try_new(name, key).expect("instance id parts must be non-empty")
    }

    pub fn try_new(name: impl Into<String>, key: impl Into<String>) -> Result<Self, ModelError> {
        let (name, key) = (name.into(), key.into());
        if name.is_empty() || key.is_empty() {
            return Err(ModelError::EmptyInstanceId);
        }
        Ok(Self { name, key })
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.key)
    }
}

/// Where an envelope or message originated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceId {
    Partition(u32),
    Client(u32),
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceId::Partition(p) => write!(f, "p{p}"),
            SourceId::Client(c) => write!(f, "c{c}"),
        }
    }
}

/// Position of a record in one partition's commit log.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct LogPosition(pub u64);

impl LogPosition {
    pub fn next(self) -> Self {
        LogPosition(self.0 + 1)
    }
}

impl fmt::Display for LogPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Globally unique message identity: origin, the origin's incarnation, and a
/// counter local to that incarnation. Incarnations change on every recovery
/// or rewind, so re-executed work never reuses an id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    pub origin: SourceId,
    pub incarnation: u32,
    pub counter: u64,
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.origin, self.incarnation, self.counter)
    }
}

impl FromStr for MessageId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadMessageId(s.to_string());
        let mut parts = s.split('.');
        let origin = parts.next().ok_or_else(bad)?;
        let incarnation = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let counter = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() || origin.len() < 2 {
            return Err(bad());
        }
        let n: u32 = origin[1..].parse().map_err(|_| bad())?;
        let origin = match &origin[..1] {
            "p" => SourceId::Partition(n),
            "c" => SourceId::Client(n),
            _ => return Err(bad()),
        };
        Ok(MessageId { origin, incarnation, counter })
    }
}

/// Issues message ids for one origin incarnation.
#[derive(Clone, Debug)]
pub struct MessageIdAllocator {
    origin: SourceId,
    incarnation: u32,
    next: u64,
}

impl MessageIdAllocator {
    pub fn new(origin: SourceId, incarnation: u32) -> Self {
        Self { origin, incarnation, next: 0 }
    }

    pub fn next_id(&mut self) -> MessageId {
        let id = MessageId { origin: self.origin, incarnation: self.incarnation, counter: self.next };
        self.next += 1;
        id
    }
}

/// A lock held by an orchestration's critical section. `seq` is the call id
/// the orchestration reserved for the lock.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LockId {
    pub holder: InstanceId,
    pub seq: u64,
}

/// Body of a message addressed to a stateful instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceBody {
    Start { orchestration: String, input: Payload },
    TaskResult { call_id: u64, result: Payload },
    EntityOp {
        op_id: u64,
        op_name: String,
        input: Payload,
        reply_to: Option<InstanceId>,
        lock: Option<LockId>,
    },
    EntityResult { op_id: u64, result: Payload },
    LockRequest { lock: LockId, op_id: u64 },
    LockGranted { op_id: u64 },
    LockRelease { lock: LockId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    /// Starts a stateless task; its single result goes to `respond_to`.
    Task { task_name: String, input: Payload, respond_to: InstanceId, call_id: u64 },
    /// Targets one stateful instance.
    Instance { target: InstanceId, body: InstanceBody },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub kind: MessageKind,
}

impl Message {
    pub fn instance(id: MessageId, target: InstanceId, body: InstanceBody) -> Self {
        Message { id, kind: MessageKind::Instance { target, body } }
    }

    /// Target instance of an instance message.
    pub fn target(&self) -> Option<&InstanceId> {
        match &self.kind {
            MessageKind::Instance { target, .. } => Some(target),
            MessageKind::Task { .. } => None,
        }
    }

    pub fn body(&self) -> Option<&InstanceBody> {
        match &self.kind {
            MessageKind::Instance { body, .. } => Some(body),
            MessageKind::Task { .. } => None,
        }
    }
}

/// Lifecycle of a work item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProgressState {
    InProgress,
    Completed,
    Persisted,
    Aborted,
}

impl ProgressState {
    pub fn can_transition_to(self, to: ProgressState) -> bool {
        use ProgressState::*;
        matches!(
            (self, to),
            (InProgress, Completed) | (InProgress, Aborted) | (Completed, Persisted) | (Completed, Aborted)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ProgressState::Persisted | ProgressState::Aborted)
    }

    pub fn token(self) -> &'static str {
        match self {
            ProgressState::InProgress => "in_progress",
            ProgressState::Completed => "completed",
            ProgressState::Persisted => "persisted",
            ProgressState::Aborted => "aborted",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "in_progress" => ProgressState::InProgress,
            "completed" => ProgressState::Completed,
            "persisted" => ProgressState::Persisted,
            "aborted" => ProgressState::Aborted,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("instance id name and key must be non-empty")]
    EmptyInstanceId,
    #[error("malformed message id `{0}`")]
    BadMessageId(String),
}

/// Errors raised by graph mutations. Each one signals a protocol bug in
/// whoever is driving the graph.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("illegal transition of vertex {vertex}: {from:?} -> {to:?}")]
    IllegalTransition { vertex: VertexId, from: ProgressState, to: ProgressState },
    #[error("message {0} was never produced")]
    UnknownMessage(MessageId),
    #[error("message {message} already consumed by non-aborted vertex {by}")]
    MessageAlreadyConsumed { message: MessageId, by: VertexId },
    #[error("message {0} produced twice")]
    DuplicateMessage(MessageId),
    #[error("malformed work item: {0}")]
    MalformedWorkItem(String),
    #[error("persisted vertex {persisted} depends on aborted vertex {aborted}")]
    PersistedDependsOnAborted { aborted: VertexId, persisted: VertexId },
}
