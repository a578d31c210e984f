//! Event-sourced partition state: instances, input position, sessions,
//! outbox and pending tasks, updated only by folding [`PartitionEvent`]s.

mod ops;
mod runtime;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstanceId, LogPosition, Message, SourceId};
use crate::orchestration::{EntityRuntimeState, HistoryEvent, HistoryEventKind, InstanceKind};

pub use ops::{complete_step, drain_outbox, ingest_input, next_step, StepUpdate};
pub use runtime::{
    Effect, FlushJob, Observation, PartitionRuntime, RuntimeConfig, RuntimeError, StepJob, StepOutput, TaskJob, TaskOutput,
    WorkRef,
};

/// Stable placement of instances: FNV-1a over `name`, a zero byte and
/// `key`, modulo the partition count.
pub fn partition_of(id: &InstanceId, partitions: u32) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.name.bytes().chain(std::iter::once(0)).chain(id.key.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % u64::from(partitions.max(1))) as u32
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupVector(pub BTreeMap<SourceId, u64>);

impl DedupVector {
    pub fn get(&self, source: &SourceId) -> u64 {
        self.0.get(source).copied().unwrap_or(0)
    }

    fn advance(&mut self, source: SourceId, seq: u64) {
        let e = self.0.entry(source).or_insert(0);
        *e = (*e).max(seq);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputState {
    pub queue_position: u64,
    pub dedup: DedupVector,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceData {
    Orchestration { history: Vec<HistoryEvent> },
    Entity(EntityRuntimeState),
}

impl InstanceData {
    pub fn completed_result(&self) -> Option<&str> {
        match self {
            InstanceData::Orchestration { history } => match history.last().map(|e| &e.kind) {
                Some(HistoryEventKind::ExecutionCompleted { result }) => Some(result),
                _ => None,
            },
            InstanceData::Entity(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceSlot {
    Cached(InstanceData),
    /// Spilled to storage under the record's current version.
    Evicted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub kind: InstanceKind,
    pub step_count: u64,
    /// Log position of the last step that changed the instance.
    pub version: LogPosition,
    pub slot: InstanceSlot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub message: Message,
    pub enqueued_at: LogPosition,
    /// Produced inside this partition (by a step or task) rather than read
    /// from the input queue.
    pub local: bool,
    pub arrival: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub target_partition: u32,
    pub seq: u64,
    pub message: Message,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub origin_logpos: LogPosition,
    pub messages: Vec<OutboundMessage>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outbox {
    pub entries: VecDeque<OutboxEntry>,
    pub next_seq: BTreeMap<u32, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingTask {
    pub message: Message,
    pub produced_at: LogPosition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionState {
    pub partition_id: u32,
    pub instances: BTreeMap<InstanceId, InstanceRecord>,
    pub input: InputState,
    pub sessions: BTreeMap<InstanceId, VecDeque<SessionEntry>>,
    pub outbox: Outbox,
    pub tasks: BTreeMap<u64, PendingTask>,
    pub next_task_id: u64,
    pub next_arrival: u64,
    pub applied_through: Option<LogPosition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagesReceived {
    pub admitted: Vec<Message>,
    pub new_position: u64,
    pub dedup_updates: Vec<(SourceId, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagesSent {
    pub through: LogPosition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCompleted {
    pub task_id: u64,
    pub response: Message,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceUpdate {
    Orchestration { new_events: Vec<HistoryEvent> },
    Entity { state: EntityRuntimeState },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCompleted {
    pub instance: InstanceId,
    pub kind: InstanceKind,
    pub consumed: u32,
    pub update: InstanceUpdate,
    pub produced_local: Vec<Message>,
    pub produced_remote: Vec<OutboundMessage>,
    pub produced_tasks: Vec<(u64, Message)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionEvent {
    MessagesReceived(MessagesReceived),
    MessagesSent(MessagesSent),
    TaskCompleted(TaskCompleted),
    StepCompleted(StepCompleted),
}

impl PartitionEvent {
    pub fn tag(&self) -> u8 {
        match self {
            PartitionEvent::MessagesReceived(_) => 0,
            PartitionEvent::MessagesSent(_) => 1,
            PartitionEvent::TaskCompleted(_) => 2,
            PartitionEvent::StepCompleted(_) => 3,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("event at {got} does not follow {expected:?}")]
    NonContiguousEvent { expected: Option<LogPosition>, got: LogPosition },
    #[error("unknown task id {0}")]
    UnknownTaskId(u64),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} is evicted and must be loaded before use")]
    InstanceEvicted(InstanceId),
    #[error("step for {instance} consumes {wanted} messages but only {available} are buffered")]
    SessionUnderflow { instance: InstanceId, wanted: u32, available: usize },
    #[error("queue entries start at {got}, expected {expected}")]
    QueueGap { expected: u64, got: u64 },
    #[error("no step in progress for {0}")]
    NoStepInProgress(InstanceId),
    #[error("message {0} does not target an instance")]
    NotAnInstanceMessage(crate::model::MessageId),
}

impl PartitionState {
    pub fn new(partition_id: u32) -> Self {
        Self {
            partition_id,
            instances: BTreeMap::new(),
            input: InputState::default(),
            sessions: BTreeMap::new(),
            outbox: Outbox::default(),
            tasks: BTreeMap::new(),
            next_task_id: 0,
            next_arrival: 0,
            applied_through: None,
        }
    }

    pub fn instance_data(&self, id: &InstanceId) -> Option<&InstanceData> {
        match &self.instances.get(id)?.slot {
            InstanceSlot::Cached(d) => Some(d),
            InstanceSlot::Evicted => None,
        }
    }

    pub fn pending_messages(&self) -> usize {
        self.sessions.values().map(VecDeque::len).sum()
    }

    fn enqueue(&mut self, message: Message, at: LogPosition, local: bool) -> Result<(), PartitionError> {
        let target = message.target().cloned().ok_or(PartitionError::NotAnInstanceMessage(message.id))?;
        let arrival = self.next_arrival;
        self.next_arrival += 1;
        self.sessions.entry(target).or_default().push_back(SessionEntry { message, enqueued_at: at, local, arrival });
        Ok(())
    }

    /// Applies the record at `logpos`. On error the state is left unchanged.
    pub fn apply_event(&mut self, logpos: LogPosition, event: &PartitionEvent) -> Result<(), PartitionError> {
        let expected = self.applied_through.map_or(LogPosition(0), LogPosition::next);
        if logpos != expected {
            return Err(PartitionError::NonContiguousEvent { expected: self.applied_through, got: logpos });
        }
        match event {
            PartitionEvent::MessagesReceived(e) => {
                if let Some(m) = e.admitted.iter().find(|m| m.target().is_none()) {
                    return Err(PartitionError::NotAnInstanceMessage(m.id));
                }
                self.input.queue_position = e.new_position;
                for (source, seq) in &e.dedup_updates {
                    self.input.dedup.advance(*source, *seq);
                }
                for m in &e.admitted {
                    self.enqueue(m.clone(), logpos, false)?;
                }
            }
            PartitionEvent::MessagesSent(e) => {
                self.outbox.entries.retain(|o| o.origin_logpos > e.through);
            }
            PartitionEvent::TaskCompleted(e) => {
                if !self.tasks.contains_key(&e.task_id) {
                    return Err(PartitionError::UnknownTaskId(e.task_id));
                }
                if e.response.target().is_none() {
                    return Err(PartitionError::NotAnInstanceMessage(e.response.id));
                }
                self.tasks.remove(&e.task_id);
                self.enqueue(e.response.clone(), logpos, true)?;
            }
            PartitionEvent::StepCompleted(e) => self.apply_step(logpos, e)?,
        }
        self.applied_through = Some(logpos);
        Ok(())
    }

    fn apply_step(&mut self, logpos: LogPosition, e: &StepCompleted) -> Result<(), PartitionError> {
        let available = self.sessions.get(&e.instance).map_or(0, VecDeque::len);
        if available < e.consumed as usize {
            return Err(PartitionError::SessionUnderflow { instance: e.instance.clone(), wanted: e.consumed, available });
        }
        let record = self.instances.get(&e.instance);
        if matches!(record, Some(InstanceRecord { slot: InstanceSlot::Evicted, .. })) {
            return Err(PartitionError::InstanceEvicted(e.instance.clone()));
        }
        if let Some(m) = e.produced_local.iter().find(|m| m.target().is_none()) {
            return Err(PartitionError::NotAnInstanceMessage(m.id));
        }

        let record = self.instances.entry(e.instance.clone()).or_insert_with(|| InstanceRecord {
            kind: e.kind,
            step_count: 0,
            version: logpos,
            slot: InstanceSlot::Cached(match e.kind {
                InstanceKind::Orchestration => InstanceData::Orchestration { history: Vec::new() },
                InstanceKind::Entity => InstanceData::Entity(EntityRuntimeState::new(String::new())),
            }),
        });
        record.step_count += 1;
        record.version = logpos;
        if let InstanceSlot::Cached(data) = &mut record.slot {
            match (&e.update, data) {
                (InstanceUpdate::Orchestration { new_events }, InstanceData::Orchestration { history }) => {
                    history.extend(new_events.iter().cloned());
                }
                (InstanceUpdate::Entity { state }, d) => *d = InstanceData::Entity(state.clone()),
                (InstanceUpdate::Orchestration { new_events }, d) => {
                    *d = InstanceData::Orchestration { history: new_events.clone() };
                }
            }
        }

        let session = self.sessions.get_mut(&e.instance).expect("checked above");
        session.drain(..e.consumed as usize);
        if session.is_empty() {
            self.sessions.remove(&e.instance);
        }
        for m in &e.produced_local {
            self.enqueue(m.clone(), logpos, true)?;
        }
        if !e.produced_remote.is_empty() {
            for m in &e.produced_remote {
                let next = self.outbox.next_seq.entry(m.target_partition).or_insert(1);
                *next = (*next).max(m.seq + 1);
            }
            self.outbox.entries.push_back(OutboxEntry { origin_logpos: logpos, messages: e.produced_remote.clone() });
        }
        for (task_id, message) in &e.produced_tasks {
            self.tasks.insert(*task_id, PendingTask { message: message.clone(), produced_at: logpos });
            self.next_task_id = self.next_task_id.max(task_id + 1);
        }
        Ok(())
    }
}
