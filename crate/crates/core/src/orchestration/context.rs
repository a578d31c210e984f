use std::collections::BTreeMap;

use super::{HistoryEventKind, OrchestrationError, OutgoingMessage, StepStatus, TaskRequest, LOCK_OP};
use crate::model::{InstanceBody, InstanceId, LockId, Payload};

/// Why a body stopped before returning a result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Interrupt {
    /// Waiting on a result that is not in the history yet.
    Suspended,
    Error(OrchestrationError),
}

impl From<OrchestrationError> for Interrupt {
    fn from(e: OrchestrationError) -> Self {
        Interrupt::Error(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallHandle(pub u64);

#[must_use = "dropping a token keeps the locks until the orchestration completes"]
#[derive(Debug, PartialEq, Eq)]
pub struct LockToken {
    lock_id: u64,
}

#[derive(Debug)]
struct HeldLock {
    lock_id: u64,
    targets: Vec<InstanceId>,
}

pub struct OrchestrationContext<'a> {
    instance: &'a InstanceId,
    input: Payload,
    // scheduling events of the prior history, with their positions
    recorded: Vec<(usize, &'a HistoryEventKind)>,
    cursor: usize,
    results: BTreeMap<u64, &'a Payload>,
    next_id: u64,
    new_events: Vec<HistoryEventKind>,
    messages: Vec<OutgoingMessage>,
    tasks: Vec<TaskRequest>,
    held: Option<HeldLock>,
    fault: Option<OrchestrationError>,
}

impl<'a> OrchestrationContext<'a> {
    /// `full` is the prior history followed by the events for this step's
    /// arrivals; only the first `prior_len` entries are replayed.
    pub(super) fn new(instance: &'a InstanceId, full: &[&'a HistoryEventKind], prior_len: usize) -> Self {
        let mut input = Payload::new();
        let mut results = BTreeMap::new();
        for kind in full {
            match kind {
                HistoryEventKind::ExecutionStarted { input: i, .. } => input = i.clone(),
                HistoryEventKind::TaskCompleted { task_id: id, result }
                | HistoryEventKind::EntityOpCompleted { op_id: id, result } => {
                    results.insert(*id, result);
                }
                _ => {}
            }
        }
        let recorded = full[..prior_len].iter().enumerate().filter(|(_, k)| k.is_scheduling()).map(|(i, k)| (i, *k)).collect();
        Self {
            instance,
            input,
            recorded,
            cursor: 0,
            results,
            next_id: 0,
            new_events: Vec::new(),
            messages: Vec::new(),
            tasks: Vec::new(),
            held: None,
            fault: None,
        }
    }

    pub fn instance_id(&self) -> &InstanceId {
        self.instance
    }

    pub fn get_input(&self) -> Payload {
        self.input.clone()
    }

    fn fail(&mut self, e: OrchestrationError) -> Interrupt {
        self.fault.get_or_insert(e).clone().into()
    }

    /// Matches a scheduling event against the recording, or appends it.
    /// Returns true when the event is new in this step.
    fn record(&mut self, event: HistoryEventKind) -> Result<bool, Interrupt> {
        if let Some(f) = &self.fault {
            return Err(f.clone().into());
        }
        match self.recorded.get(self.cursor) {
            Some((_, recorded)) if **recorded == event => {
                self.cursor += 1;
                Ok(false)
            }
            Some((position, recorded)) => {
                let e = OrchestrationError::NondeterminismDetected {
                    position: *position,
                    expected: format!("{recorded:?}"),
                    actual: format!("{event:?}"),
                };
                Err(self.fail(e))
            }
            None => {
                self.new_events.push(event);
                Ok(true)
            }
        }
    }

    fn alloc(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn schedule_activity(&mut self, name: &str, input: &str) -> Result<CallHandle, Interrupt> {
        let task_id = self.alloc();
        let event = HistoryEventKind::TaskScheduled { task_id, task_name: name.into(), input: input.into() };
        if self.record(event)? {
            self.tasks.push(TaskRequest { task_id, task_name: name.into(), input: input.into() });
        }
        Ok(CallHandle(task_id))
    }

    pub fn call_activity(&mut self, name: &str, input: &str) -> Result<Payload, Interrupt> {
        let h = self.schedule_activity(name, input)?;
        self.wait(&h)
    }

    fn current_lock(&self, target: &InstanceId) -> Option<LockId> {
        let held = self.held.as_ref()?;
        held.targets.contains(target).then(|| LockId { holder: self.instance.clone(), seq: held.lock_id })
    }

    /// Sends an operation to an entity; the result arrives later. Calls to
    /// locked entities from inside the critical section carry the lock.
    pub fn schedule_entity(&mut self, target: &InstanceId, op: &str, input: &str) -> Result<CallHandle, Interrupt> {
        let op_id = self.alloc();
        let event = HistoryEventKind::EntityOpScheduled {
            op_id,
            target: target.clone(),
            op_name: op.into(),
            input: input.into(),
        };
        if self.record(event)? {
            let body = InstanceBody::EntityOp {
                op_id,
                op_name: op.into(),
                input: input.into(),
                reply_to: Some(self.instance.clone()),
                lock: self.current_lock(target),
            };
            self.messages.push(OutgoingMessage { target: target.clone(), body });
        }
        Ok(CallHandle(op_id))
    }

    pub fn call_entity(&mut self, target: &InstanceId, op: &str, input: &str) -> Result<Payload, Interrupt> {
        let h = self.schedule_entity(target, op, input)?;
        self.wait(&h)
    }

    pub fn wait(&mut self, handle: &CallHandle) -> Result<Payload, Interrupt> {
        if let Some(f) = &self.fault {
            return Err(f.clone().into());
        }
        self.results.get(&handle.0).map(|r| (*r).clone()).ok_or(Interrupt::Suspended)
    }

    /// Resumes once every result is recorded; results come back in issue
    /// order.
    pub fn wait_all(&mut self, handles: &[CallHandle]) -> Result<Vec<Payload>, Interrupt> {
        handles.iter().map(|h| self.wait(h)).collect()
    }

    /// Acquires locks on all targets, one request at a time in ascending
    /// (name, key) order.
    pub fn lock(&mut self, targets: &[InstanceId]) -> Result<LockToken, Interrupt> {
        if let Some(held) = &self.held {
            let e = OrchestrationError::NestedLock(held.lock_id);
            return Err(self.fail(e));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        let lock_id = self.alloc();
        let lock = LockId { holder: self.instance.clone(), seq: lock_id };
        for target in &targets {
            let op_id = self.alloc();
            let event = HistoryEventKind::EntityOpScheduled {
                op_id,
                target: target.clone(),
                op_name: LOCK_OP.into(),
                input: Payload::new(),
            };
            if self.record(event)? {
                let body = InstanceBody::LockRequest { lock: lock.clone(), op_id };
                self.messages.push(OutgoingMessage { target: target.clone(), body });
            }
            if !self.results.contains_key(&op_id) {
                return Err(Interrupt::Suspended);
            }
        }
        self.record(HistoryEventKind::LocksAcquired { lock_id, targets: targets.clone() })?;
        self.held = Some(HeldLock { lock_id, targets });
        Ok(LockToken { lock_id })
    }

    pub fn unlock(&mut self, token: LockToken) -> Result<(), Interrupt> {
        match &self.held {
            Some(h) if h.lock_id == token.lock_id => self.release(),
            _ => Ok(()),
        }
    }

    fn release(&mut self) -> Result<(), Interrupt> {
        let Some(held) = self.held.take() else { return Ok(()) };
        if self.record(HistoryEventKind::LocksReleased { lock_id: held.lock_id })? {
            let lock = LockId { holder: self.instance.clone(), seq: held.lock_id };
            for target in held.targets {
                self.messages.push(OutgoingMessage { target, body: InstanceBody::LockRelease { lock: lock.clone() } });
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    pub(super) fn finish(
        mut self,
        outcome: Result<Payload, Interrupt>,
    ) -> Result<(Vec<HistoryEventKind>, Vec<OutgoingMessage>, Vec<TaskRequest>, StepStatus), OrchestrationError> {
        if let Some(f) = self.fault.take() {
            return Err(f);
        }
        let status = match outcome {
            Ok(result) => {
                if let Err(Interrupt::Error(e)) = self.release() {
                    return Err(e);
                }
                StepStatus::Completed { result }
            }
            Err(Interrupt::Suspended) => StepStatus::Running,
            Err(Interrupt::Error(e)) => return Err(e),
        };
        if let Some((position, recorded)) = self.recorded.get(self.cursor) {
            return Err(OrchestrationError::NondeterminismDetected {
                position: *position,
                expected: format!("{recorded:?}"),
                actual: "nothing".into(),
            });
        }
        if let StepStatus::Completed { result } = &status {
            self.new_events.push(HistoryEventKind::ExecutionCompleted { result: result.clone() });
        }
        Ok((self.new_events, self.messages, self.tasks, status))
    }
}
