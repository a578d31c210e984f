//! Sans-IO owner loop of one partition. The host feeds it queue entries,
//! finished work and flush completions, and carries out the returned
//! [`Effect`]s.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use super::{
    complete_step, drain_outbox, ingest_input, next_step, InstanceData, InstanceUpdate, PartitionError, PartitionEvent,
    PartitionState, StepUpdate, TaskCompleted,
};
use crate::model::{InstanceBody, InstanceId, LogPosition, Message, MessageId, MessageIdAllocator, MessageKind, Payload, SourceId, VertexKind};
use crate::orchestration::{
    execute_entity_step, execute_orchestration_step, EntityRuntimeState, HistoryEvent, HistoryEventKind, InstanceKind,
    OrchestrationError, Registry,
};
use crate::speculation::{
    RecoveryNotice, SpeculationMode, SpeculationTag, SpeculativeDependencySet, TagFate, UnconfirmedSends,
};
use crate::storage::{InstanceCache, Storage, StorageError, LEASE_RENEW_US};
use crate::transport::{Envelope, EnvelopePayload};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub partition: u32,
    pub partitions: u32,
    pub node: u32,
    pub mode: SpeculationMode,
    pub checkpoint_events: u64,
    pub checkpoint_interval_us: u64,
    pub cache_budget: Option<usize>,
    pub max_batch: usize,
}

impl RuntimeConfig {
    pub fn new(partition: u32, partitions: u32, node: u32, mode: SpeculationMode) -> Self {
        Self {
            partition,
            partitions,
            node,
            mode,
            checkpoint_events: 256,
            checkpoint_interval_us: 10_000_000,
            cache_budget: None,
            max_batch: 64,
        }
    }
}

/// Identity of one execution of a work item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkRef {
    pub partition: u32,
    pub incarnation: u32,
    pub serial: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    Started { wref: WorkRef, kind: VertexKind, consumed: Vec<MessageId> },
    Finished { wref: WorkRef, produced: Vec<MessageId> },
    Persisted(Vec<WorkRef>),
    RolledBack(Vec<WorkRef>),
    EntityState { instance: InstanceId, state: Payload },
    Rewound { partition: u32, rewind_to: Option<LogPosition>, discarded: usize },
}

pub struct StepJob {
    pub wref: WorkRef,
    pub instance: InstanceId,
    pub kind: Option<InstanceKind>,
    pub data: Option<InstanceData>,
    pub batch: Vec<Message>,
    registry: Arc<Registry>,
}

pub struct StepOutput {
    pub wref: WorkRef,
    pub instance: InstanceId,
    pub update: StepUpdate,
}

fn error_completion(history: &[HistoryEvent], batch: &[Message], e: &OrchestrationError) -> Vec<HistoryEvent> {
    let mut kinds = Vec::new();
    if history.is_empty() {
        match batch.iter().find_map(|m| match m.body() {
            Some(InstanceBody::Start { orchestration, input }) => Some((orchestration.clone(), input.clone())),
            _ => None,
        }) {
            Some((orchestration_name, input)) => {
                kinds.push(HistoryEventKind::ExecutionStarted { orchestration_name, input })
            }
            None => return Vec::new(),
        }
    }
    kinds.push(HistoryEventKind::ExecutionCompleted { result: format!("error:{e}") });
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| HistoryEvent { seq: (history.len() + i) as u64, kind })
        .collect()
}

impl StepJob {
    /// Runs the user code for this step. Pure apart from the user code.
    pub fn execute(&self) -> StepOutput {
        let name = &self.instance.name;
        let update = match (self.kind, &self.data) {
            (Some(InstanceKind::Orchestration), data) => {
                let empty = Vec::new();
                let history = match data {
                    Some(InstanceData::Orchestration { history }) => history,
                    _ => &empty,
                };
                let def = self.registry.get_orchestration(name).expect("kind resolved from registry");
                match execute_orchestration_step(def, &self.instance, history, &self.batch, self.registry.max_history) {
                    Ok(o) => StepUpdate {
                        kind: InstanceKind::Orchestration,
                        update: InstanceUpdate::Orchestration { new_events: o.new_history_events },
                        messages: o.produced_messages,
                        tasks: o.produced_tasks,
                    },
                    Err(e) => StepUpdate {
                        kind: InstanceKind::Orchestration,
                        update: InstanceUpdate::Orchestration { new_events: error_completion(history, &self.batch, &e) },
                        messages: vec![],
                        tasks: vec![],
                    },
                }
            }
            (Some(InstanceKind::Entity), data) => {
                let def = self.registry.get_entity(name).expect("kind resolved from registry");
                let state = match data {
                    Some(InstanceData::Entity(s)) => s.clone(),
                    _ => EntityRuntimeState::new(def.initial_state.clone()),
                };
                let (state, messages) =
                    execute_entity_step(def, &self.instance, &state, &self.batch, false).unwrap_or((state, vec![]));
                StepUpdate { kind: InstanceKind::Entity, update: InstanceUpdate::Entity { state }, messages, tasks: vec![] }
            }
            // nothing is registered under this name; the messages are dropped
            (None, _) => StepUpdate {
                kind: InstanceKind::Orchestration,
                update: InstanceUpdate::Orchestration { new_events: vec![] },
                messages: vec![],
                tasks: vec![],
            },
        };
        StepOutput { wref: self.wref, instance: self.instance.clone(), update }
    }
}

pub struct TaskJob {
    pub wref: WorkRef,
    pub task_id: u64,
    pub message: Message,
    registry: Arc<Registry>,
}

pub struct TaskOutput {
    pub wref: WorkRef,
    pub task_id: u64,
    pub result: Payload,
}

impl TaskJob {
    pub fn task_name(&self) -> &str {
        match &self.message.kind {
            MessageKind::Task { task_name, .. } => task_name,
            MessageKind::Instance { .. } => "",
        }
    }

    pub fn execute(&self, rng: &mut dyn RngCore) -> TaskOutput {
        let result = match &self.message.kind {
            MessageKind::Task { task_name, input, .. } => match self.registry.get_activity(task_name) {
                Some(f) => f(input, rng),
                None => format!("error:unknown activity {task_name}"),
            },
            MessageKind::Instance { .. } => "error:not a task".into(),
        };
        TaskOutput { wref: self.wref, task_id: self.task_id, result }
    }
}

/// A batch the host must append to the commit log before calling
/// [`PartitionRuntime::flushed`].
#[derive(Clone, Debug)]
pub struct FlushJob {
    pub partition: u32,
    pub epoch: u64,
    pub first: LogPosition,
    pub events: Vec<PartitionEvent>,
}

impl FlushJob {
    pub fn through(&self) -> LogPosition {
        LogPosition(self.first.0 + self.events.len() as u64 - 1)
    }

    pub fn execute(&self, storage: &Storage) -> Result<(), StorageError> {
        storage.log_append(self.partition, self.epoch, self.first, &self.events)
    }
}

pub enum Effect {
    RunStep(StepJob),
    RunTask(TaskJob),
    Flush(FlushJob),
    Send(Vec<Envelope>),
    /// An orchestration's completion became durable.
    Completed { instance: InstanceId, result: Payload, flush_waits: u32 },
    Observe(Observation),
}

pub struct PartitionRuntime {
    cfg: RuntimeConfig,
    registry: Arc<Registry>,
    storage: Storage,
    epoch: u64,
    incarnation: u32,
    state: PartitionState,
    durable: Option<LogPosition>,
    pending: VecDeque<(LogPosition, PartitionEvent)>,
    flushing: Option<LogPosition>,
    read_pos: u64,
    ids: MessageIdAllocator,
    serial: u64,
    busy: BTreeMap<InstanceId, WorkRef>,
    step_batch: BTreeMap<WorkRef, u32>,
    running_tasks: BTreeMap<u64, WorkRef>,
    pending_refs: BTreeMap<LogPosition, WorkRef>,
    completions: BTreeMap<LogPosition, (InstanceId, Payload)>,
    flush_waits: BTreeMap<InstanceId, u32>,
    deps: SpeculativeDependencySet,
    unconfirmed: UnconfirmedSends,
    confirmed: BTreeSet<SpeculationTag>,
    notices: BTreeMap<(u32, u32), RecoveryNotice>,
    /// Rewind notices waiting for their recovered position to be durable,
    /// oldest first.
    deferred_notices: VecDeque<RecoveryNotice>,
    /// Fetched queue entries from `read_pos` on that are not admitted yet.
    lookahead: VecDeque<(u64, Envelope)>,
    /// Latest own incarnation that began by discarding speculative work.
    abort_incarnation: u32,
    cache: InstanceCache,
    since_checkpoint: u64,
    last_checkpoint_us: u64,
    last_renew_us: u64,
    stopping: bool,
    out: Vec<Effect>,
    pub rewinds: u64,
}

impl PartitionRuntime {
    /// Takes the lease, recovers from storage and resumes: re-reads the input
    /// queue from the recovered position and re-dispatches pending tasks.
    pub fn start(
        cfg: RuntimeConfig,
        registry: Arc<Registry>,
        storage: Storage,
        now_us: u64,
    ) -> Result<(Self, Vec<Effect>), RuntimeError> {
        let p = cfg.partition;
        let epoch = storage.lease_acquire(p, cfg.node, now_us)?;
        let incarnation = storage.bump_incarnation(p)?;
        let (state, tail) = storage.recover(p)?;
        let mut rt = Self {
            registry,
            epoch,
            incarnation,
            read_pos: state.input.queue_position,
            state,
            durable: tail,
            pending: VecDeque::new(),
            flushing: None,
            ids: MessageIdAllocator::new(SourceId::Partition(p), incarnation),
            serial: 0,
            busy: BTreeMap::new(),
            step_batch: BTreeMap::new(),
            running_tasks: BTreeMap::new(),
            pending_refs: BTreeMap::new(),
            completions: BTreeMap::new(),
            flush_waits: BTreeMap::new(),
            deps: SpeculativeDependencySet::default(),
            unconfirmed: UnconfirmedSends::default(),
            confirmed: BTreeSet::new(),
            notices: BTreeMap::new(),
            deferred_notices: VecDeque::new(),
            lookahead: VecDeque::new(),
            abort_incarnation: if incarnation > 1 { incarnation } else { 0 },
            cache: InstanceCache::new(cfg.cache_budget),
            since_checkpoint: 0,
            last_checkpoint_us: now_us,
            last_renew_us: now_us,
            stopping: false,
            out: Vec::new(),
            rewinds: 0,
            storage,
            cfg,
        };
        if rt.cfg.mode == SpeculationMode::Global {
            rt.broadcast(RecoveryNotice { partition: p, incarnation, recovered_logpos: tail });
        }
        rt.after_change()?;
        let effects = rt.take();
        Ok((rt, effects))
    }

    pub fn partition(&self) -> u32 {
        self.cfg.partition
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn incarnation(&self) -> u32 {
        self.incarnation
    }

    pub fn state(&self) -> &PartitionState {
        &self.state
    }

    pub fn durable(&self) -> Option<LogPosition> {
        self.durable
    }

    /// Next input queue position to read.
    pub fn read_pos(&self) -> u64 {
        self.read_pos
    }

    /// Next input queue position the host should fetch from.
    pub fn fetch_pos(&self) -> u64 {
        self.read_pos + self.lookahead.len() as u64
    }

    pub fn max_batch(&self) -> usize {
        self.cfg.max_batch
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        (self.cache.evictions, self.cache.loads)
    }

    /// Nothing buffered, running, unflushed or awaiting confirmation.
    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
            && self.flushing.is_none()
            && self.busy.is_empty()
            && self.running_tasks.is_empty()
            && self.state.sessions.is_empty()
            && self.state.tasks.is_empty()
            && self.state.outbox.entries.is_empty()
            && self.deps.is_empty()
            && self.deferred_notices.is_empty()
            && self.lookahead.is_empty()
    }

    fn take(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.out)
    }

    fn observe(&mut self, o: Observation) {
        self.out.push(Effect::Observe(o));
    }

    fn next_ref(&mut self) -> WorkRef {
        self.serial += 1;
        WorkRef { partition: self.cfg.partition, incarnation: self.incarnation, serial: self.serial }
    }

    fn conservative(&self) -> bool {
        self.cfg.mode == SpeculationMode::Conservative
    }

    fn is_durable(&self, pos: LogPosition) -> bool {
        self.durable.is_some_and(|d| pos <= d)
    }

    fn broadcast(&mut self, notice: RecoveryNotice) {
        let envs = (0..self.cfg.partitions)
            .filter(|q| *q != self.cfg.partition)
            .map(|q| Envelope::control(q, SourceId::Partition(self.cfg.partition), EnvelopePayload::Recovery(notice)))
            .collect::<Vec<_>>();
        if !envs.is_empty() {
            self.out.push(Effect::Send(envs));
        }
    }

    fn append(&mut self, event: PartitionEvent, wref: Option<WorkRef>) -> Result<LogPosition, RuntimeError> {
        let pos = self.state.applied_through.map_or(LogPosition(0), LogPosition::next);
        self.state.apply_event(pos, &event)?;
        self.pending.push_back((pos, event));
        if let Some(w) = wref {
            self.pending_refs.insert(pos, w);
        }
        self.since_checkpoint += 1;
        Ok(pos)
    }

    /// Earliest fate any learned recovery notice assigns to `tag`.
    fn notice_fate(&self, tag: &SpeculationTag) -> TagFate {
        let p = tag.source_partition;
        self.notices
            .range((p, tag.incarnation + 1)..=(p, u32::MAX))
            .next()
            .map_or(TagFate::Unknown, |(_, n)| n.fate(tag))
    }

    fn settled(&self, tag: &SpeculationTag) -> bool {
        self.confirmed.contains(tag) || self.notice_fate(tag) == TagFate::Confirmed
    }

    /// Highest incarnation of `partition` learned from its notices.
    fn known_incarnation(&self, partition: u32) -> u32 {
        self.notices.range((partition, 0)..=(partition, u32::MAX)).next_back().map_or(0, |(k, _)| k.1)
    }

    /// A speculative message whose sender had not yet seen our latest abort
    /// may depend on the discarded work. It waits for its fate instead of
    /// being consumed.
    fn held(&self, env: &Envelope) -> bool {
        let Some(tag) = env.speculation_tag else { return false };
        matches!(env.payload, EnvelopePayload::Message(_))
            && env.known_incarnation < self.abort_incarnation
            && !self.settled(&tag)
            && self.notice_fate(&tag) != TagFate::Aborted
    }

    /// Ingests a contiguous run of input queue entries starting at
    /// [`fetch_pos`](Self::fetch_pos).
    pub fn on_input(&mut self, entries: &[(u64, Envelope)]) -> Result<Vec<Effect>, RuntimeError> {
        if entries.is_empty() || self.stopping || entries[0].0 != self.fetch_pos() {
            return Ok(self.take());
        }
        self.lookahead.extend(entries.iter().cloned());
        // controls take effect on sight, ahead of any held message
        for (_, env) in entries {
            match &env.payload {
                EnvelopePayload::Message(_) => {}
                EnvelopePayload::Confirm { tag } => {
                    self.deps.confirm(tag);
                    self.confirmed.insert(*tag);
                }
                EnvelopePayload::Recovery(n) => {
                    self.notices.entry((n.partition, n.incarnation)).or_insert(*n);
                    if let Some(first) = self.deps.on_recovery_notice(n) {
                        self.rewind(first.0.checked_sub(1).map(LogPosition))?;
                        self.after_change()?;
                        return Ok(self.take());
                    }
                }
            }
        }
        self.admit()?;
        self.after_change()?;
        Ok(self.take())
    }

    /// Admits the longest run of looked-ahead entries that holds nothing back.
    fn admit(&mut self) -> Result<(), RuntimeError> {
        let n = self.lookahead.iter().position(|(_, e)| self.held(e)).unwrap_or(self.lookahead.len());
        if n == 0 {
            return Ok(());
        }
        let entries: Vec<(u64, Envelope)> = self.lookahead.drain(..n).collect();
        let event = ingest_input(&self.state, &entries, |env| {
            env.speculation_tag.is_some_and(|t| self.notice_fate(&t) == TagFate::Aborted)
        })?;
        let admitted: BTreeSet<MessageId> = match &event {
            PartitionEvent::MessagesReceived(r) => r.admitted.iter().map(|m| m.id).collect(),
            _ => BTreeSet::new(),
        };
        let pos = self.append(event, None)?;
        self.read_pos = self.state.input.queue_position;
        for (_, env) in &entries {
            if let (EnvelopePayload::Message(m), Some(tag)) = (&env.payload, env.speculation_tag) {
                if admitted.contains(&m.id) && !self.settled(&tag) {
                    self.deps.register(tag, pos);
                }
            }
        }
        Ok(())
    }

    pub fn step_done(&mut self, output: StepOutput) -> Result<Vec<Effect>, RuntimeError> {
        if self.busy.get(&output.instance) != Some(&output.wref) {
            return Ok(self.take());
        }
        let busy: BTreeSet<InstanceId> = BTreeSet::from([output.instance.clone()]);
        let batch_len = self.step_batch.remove(&output.wref).unwrap_or(0);
        let completed = match &output.update.update {
            InstanceUpdate::Orchestration { new_events } => new_events.iter().find_map(|e| match &e.kind {
                HistoryEventKind::ExecutionCompleted { result } => Some(result.clone()),
                _ => None,
            }),
            InstanceUpdate::Entity { .. } => None,
        };
        let entity_state = match &output.update.update {
            InstanceUpdate::Entity { state } => Some(state.user_state.clone()),
            InstanceUpdate::Orchestration { .. } => None,
        };
        let event = complete_step(
            &self.state,
            &busy,
            &output.instance,
            batch_len,
            output.update,
            &mut self.ids,
            self.cfg.partitions,
        )?;
        let produced: Vec<MessageId> = match &event {
            PartitionEvent::StepCompleted(s) => s
                .produced_local
                .iter()
                .map(|m| m.id)
                .chain(s.produced_remote.iter().map(|m| m.message.id))
                .chain(s.produced_tasks.iter().map(|(_, m)| m.id))
                .collect(),
            _ => vec![],
        };
        self.busy.remove(&output.instance);
        let pos = self.append(event, Some(output.wref))?;
        if let Some(result) = completed {
            self.completions.insert(pos, (output.instance.clone(), result));
        }
        self.observe(Observation::Finished { wref: output.wref, produced });
        if let Some(state) = entity_state {
            self.observe(Observation::EntityState { instance: output.instance, state });
        }
        self.after_change()?;
        Ok(self.take())
    }

    pub fn task_done(&mut self, output: TaskOutput) -> Result<Vec<Effect>, RuntimeError> {
        if self.running_tasks.get(&output.task_id) != Some(&output.wref) {
            return Ok(self.take());
        }
        self.running_tasks.remove(&output.task_id);
        let Some(task) = self.state.tasks.get(&output.task_id) else { return Ok(self.take()) };
        let MessageKind::Task { respond_to, call_id, .. } = &task.message.kind else { return Ok(self.take()) };
        let response = Message::instance(
            self.ids.next_id(),
            respond_to.clone(),
            InstanceBody::TaskResult { call_id: *call_id, result: output.result },
        );
        let id = response.id;
        self.append(PartitionEvent::TaskCompleted(TaskCompleted { task_id: output.task_id, response }), Some(output.wref))?;
        self.observe(Observation::Finished { wref: output.wref, produced: vec![id] });
        self.after_change()?;
        Ok(self.take())
    }

    /// The host durably appended the batch ending at `through`.
    pub fn flushed(&mut self, through: LogPosition, now_us: u64) -> Result<Vec<Effect>, RuntimeError> {
        let old = self.durable;
        if old.is_some_and(|d| d >= through) {
            return Ok(self.take());
        }
        self.durable = Some(through);
        if self.flushing.is_some_and(|f| f <= through) {
            self.flushing = None;
        }
        while self.pending.front().is_some_and(|(p, _)| *p <= through) {
            self.pending.pop_front();
        }
        let in_range = |p: &LogPosition| old.is_none_or(|o| *p > o) && *p <= through;

        let rest = self.pending_refs.split_off(&through.next());
        let persisted: Vec<WorkRef> = std::mem::replace(&mut self.pending_refs, rest).into_values().collect();
        if !persisted.is_empty() {
            self.observe(Observation::Persisted(persisted));
        }

        let mut released: BTreeSet<InstanceId> = BTreeSet::new();
        if self.conservative() {
            for (id, s) in &self.state.sessions {
                if s.iter().any(|e| e.local && in_range(&e.enqueued_at)) {
                    released.insert(id.clone());
                }
            }
            for t in self.state.tasks.values() {
                if in_range(&t.produced_at) {
                    if let MessageKind::Task { respond_to, .. } = &t.message.kind {
                        released.insert(respond_to.clone());
                    }
                }
            }
        }
        let rest = self.completions.split_off(&through.next());
        let done = std::mem::replace(&mut self.completions, rest);
        released.extend(done.values().map(|(i, _)| i.clone()));
        for id in released {
            *self.flush_waits.entry(id).or_insert(0) += 1;
        }
        for (instance, result) in done.into_values() {
            let flush_waits = self.flush_waits.remove(&instance).unwrap_or(0);
            self.out.push(Effect::Completed { instance, result, flush_waits });
        }

        if self.cfg.mode == SpeculationMode::Global {
            self.send_confirms();
        }
        self.after_change()?;
        self.maybe_checkpoint(now_us)?;
        Ok(self.take())
    }

    fn send_confirms(&mut self) {
        let Some(d) = self.durable else { return };
        let p = self.cfg.partition;
        let envs: Vec<Envelope> = self
            .unconfirmed
            .on_persisted(p, d)
            .into_iter()
            .map(|(target, tag)| Envelope::control(target, SourceId::Partition(p), EnvelopePayload::Confirm { tag }))
            .collect();
        if !envs.is_empty() {
            self.out.push(Effect::Send(envs));
        }
    }

    /// Periodic housekeeping: lease renewal and time-based checkpoints.
    pub fn tick(&mut self, now_us: u64) -> Result<Vec<Effect>, RuntimeError> {
        if now_us.saturating_sub(self.last_renew_us) >= LEASE_RENEW_US {
            self.storage.lease_renew(self.cfg.partition, self.cfg.node, self.epoch, now_us)?;
            self.last_renew_us = now_us;
        }
        self.maybe_checkpoint(now_us)?;
        Ok(self.take())
    }

    fn maybe_checkpoint(&mut self, now_us: u64) -> Result<(), RuntimeError> {
        if self.since_checkpoint == 0 || !self.pending.is_empty() || self.flushing.is_some() {
            return Ok(());
        }
        if self.since_checkpoint >= self.cfg.checkpoint_events
            || now_us.saturating_sub(self.last_checkpoint_us) >= self.cfg.checkpoint_interval_us
        {
            self.storage.checkpoint_write(self.cfg.partition, self.epoch, &self.state)?;
            self.since_checkpoint = 0;
            self.last_checkpoint_us = now_us;
        }
        Ok(())
    }

    /// Graceful hand-off: persists what may be persisted, checkpoints if
    /// possible and releases the lease. Everything else is rolled back.
    pub fn stop(mut self, now_us: u64) -> Result<Vec<Effect>, RuntimeError> {
        self.stopping = true;
        let start = self.durable.map_or(LogPosition(0), LogPosition::next);
        let barrier = self.barrier();
        let events: Vec<PartitionEvent> = self
            .pending
            .iter()
            .filter(|(p, _)| *p >= start && barrier.is_none_or(|b| *p < b))
            .map(|(_, e)| e.clone())
            .collect();
        if !events.is_empty() {
            let job = FlushJob { partition: self.cfg.partition, epoch: self.epoch, first: start, events };
            job.execute(&self.storage)?;
            self.flushing = None;
            let mut effects = self.flushed(job.through(), now_us)?;
            self.out.append(&mut effects);
        }
        if self.pending.is_empty() {
            self.storage.checkpoint_write(self.cfg.partition, self.epoch, &self.state)?;
        }
        self.storage.lease_release(self.cfg.partition, self.cfg.node, self.epoch)?;
        let mut rolled: Vec<WorkRef> = self.pending_refs.values().copied().collect();
        rolled.extend(self.busy.values().copied());
        rolled.extend(self.running_tasks.values().copied());
        if !rolled.is_empty() {
            self.observe(Observation::RolledBack(rolled));
        }
        let out = self.take();
        Ok(out
            .into_iter()
            .filter(|e| matches!(e, Effect::Send(_) | Effect::Completed { .. } | Effect::Observe(_)))
            .collect())
    }

    fn barrier(&self) -> Option<LogPosition> {
        match self.cfg.mode {
            SpeculationMode::Global => self.deps.barrier(),
            _ => None,
        }
    }

    /// Discards everything after `rewind_to` and rebuilds from storage.
    fn rewind(&mut self, rewind_to: Option<LogPosition>) -> Result<(), RuntimeError> {
        let p = self.cfg.partition;
        let keep = |pos: &LogPosition| rewind_to.is_some_and(|r| *pos <= r);
        let split = self.pending.iter().position(|(pos, _)| !keep(pos)).unwrap_or(self.pending.len());
        let discarded = self.pending.split_off(split);
        self.storage.log_truncate_after(p, self.epoch, rewind_to)?;
        let (mut state, tail) = self.storage.recover(p)?;
        for (pos, ev) in &self.pending {
            if tail.is_some_and(|t| *pos <= t) {
                continue;
            }
            if let PartitionEvent::StepCompleted(s) = ev {
                self.storage.materialize(p, &mut state, &s.instance)?;
            }
            state.apply_event(*pos, ev)?;
        }
        self.state = state;
        self.incarnation = self.storage.bump_incarnation(p)?;
        self.ids = MessageIdAllocator::new(SourceId::Partition(p), self.incarnation);
        self.rewinds += 1;

        let from = rewind_to.map_or(LogPosition(0), LogPosition::next);
        let mut rolled: Vec<WorkRef> = self.pending_refs.split_off(&from).into_values().collect();
        rolled.extend(std::mem::take(&mut self.busy).into_values());
        rolled.extend(std::mem::take(&mut self.running_tasks).into_values());
        self.step_batch.clear();
        self.completions.split_off(&from);
        self.deps.discard_after(rewind_to);
        self.unconfirmed.discard_after(rewind_to);
        self.read_pos = self.state.input.queue_position;
        self.lookahead.clear();
        self.abort_incarnation = self.incarnation;
        // records an unsent notice vouches for may be gone now
        for n in &mut self.deferred_notices {
            if rewind_to.is_none_or(|r| n.recovered_logpos.is_some_and(|q| q > r)) {
                n.recovered_logpos = rewind_to;
            }
        }
        self.deferred_notices.push_back(RecoveryNotice { partition: p, incarnation: self.incarnation, recovered_logpos: rewind_to });
        if !rolled.is_empty() {
            self.observe(Observation::RolledBack(rolled));
        }
        self.observe(Observation::Rewound { partition: p, rewind_to, discarded: discarded.len() });
        Ok(())
    }

    /// Common tail of every state change: notices, sends, new work, flushes.
    fn after_change(&mut self) -> Result<(), RuntimeError> {
        while let Some(n) = self.deferred_notices.front().copied() {
            if !n.recovered_logpos.is_none_or(|r| self.is_durable(r)) {
                break;
            }
            self.deferred_notices.pop_front();
            self.broadcast(n);
        }
        self.drain()?;
        if !self.stopping {
            self.dispatch()?;
        }
        let pinned: BTreeSet<InstanceId> = self.busy.keys().cloned().collect();
        self.cache.enforce(&self.storage, &mut self.state, &pinned)?;
        self.maybe_flush();
        Ok(())
    }

    fn drain(&mut self) -> Result<(), RuntimeError> {
        let (mut envs, event) = drain_outbox(&self.state, self.durable, self.cfg.mode, self.incarnation);
        for e in &mut envs {
            e.known_incarnation = self.known_incarnation(e.target_partition);
        }
        if let Some(ev) = event {
            self.append(ev, None)?;
        }
        if envs.is_empty() {
            return Ok(());
        }
        if self.cfg.mode == SpeculationMode::Global {
            for e in &envs {
                if let Some(tag) = e.speculation_tag {
                    self.unconfirmed.record(tag, e.target_partition);
                }
            }
            self.out.push(Effect::Send(envs));
            self.send_confirms();
        } else {
            self.out.push(Effect::Send(envs));
        }
        Ok(())
    }

    fn dispatch(&mut self) -> Result<(), RuntimeError> {
        let conservative = self.conservative();
        let durable = self.durable;
        loop {
            let busy: BTreeSet<InstanceId> = self.busy.keys().cloned().collect();
            let Some((instance, batch)) = next_step(&self.state, &busy, |e| {
                !e.local || !conservative || durable.is_some_and(|d| e.enqueued_at <= d)
            }) else {
                break;
            };
            self.cache.touch(&self.storage, &mut self.state, &instance)?;
            let record = self.state.instances.get(&instance);
            let kind = record.map(|r| r.kind).or_else(|| self.registry.kind_of(&instance.name));
            let ordinal = record.map_or(0, |r| r.step_count) + 1;
            let data = self.state.instance_data(&instance).cloned();
            let wref = self.next_ref();
            self.busy.insert(instance.clone(), wref);
            self.step_batch.insert(wref, batch.len() as u32);
            self.observe(Observation::Started {
                wref,
                kind: VertexKind::Step { instance: instance.clone(), ordinal },
                consumed: batch.iter().map(|m| m.id).collect(),
            });
            self.out.push(Effect::RunStep(StepJob { wref, instance, kind, data, batch, registry: self.registry.clone() }));
        }
        let ready: Vec<(u64, Message)> = self
            .state
            .tasks
            .iter()
            .filter(|(id, t)| !self.running_tasks.contains_key(id) && (!conservative || self.is_durable(t.produced_at)))
            .map(|(id, t)| (*id, t.message.clone()))
            .collect();
        for (task_id, message) in ready {
            let wref = self.next_ref();
            self.running_tasks.insert(task_id, wref);
            let task_name = match &message.kind {
                MessageKind::Task { task_name, .. } => task_name.clone(),
                MessageKind::Instance { .. } => String::new(),
            };
            self.observe(Observation::Started { wref, kind: VertexKind::Task { task_name }, consumed: vec![message.id] });
            self.out.push(Effect::RunTask(TaskJob { wref, task_id, message, registry: self.registry.clone() }));
        }
        Ok(())
    }

    fn maybe_flush(&mut self) {
        if self.flushing.is_some() || self.stopping {
            return;
        }
        let start = self.durable.map_or(LogPosition(0), LogPosition::next);
        let barrier = self.barrier();
        let events: Vec<PartitionEvent> = self
            .pending
            .iter()
            .filter(|(p, _)| *p >= start && barrier.is_none_or(|b| *p < b))
            .map(|(_, e)| e.clone())
            .collect();
        if events.is_empty() {
            return;
        }
        let job = FlushJob { partition: self.cfg.partition, epoch: self.epoch, first: start, events };
        self.flushing = Some(job.through());
        self.out.push(Effect::Flush(job));
    }
}
