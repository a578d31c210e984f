use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::OutgoingMessage;
use crate::model::{InstanceBody, InstanceId, LockId, Message, Payload};

/// Operation signature: `(ctx, state, input) -> (new state, result)`.
pub type EntityOpFn = dyn Fn(&mut EntityOpContext<'_>, &Payload, &Payload) -> (Payload, Payload) + Send + Sync;

#[derive(Clone)]
pub struct EntityDefinition {
    pub name: String,
    pub initial_state: Payload,
    pub operations: BTreeMap<String, Arc<EntityOpFn>>,
}

impl EntityDefinition {
    pub fn new(name: impl Into<String>, initial_state: impl Into<Payload>) -> Self {
        Self { name: name.into(), initial_state: initial_state.into(), operations: BTreeMap::new() }
    }

    pub fn op(
        mut self,
        name: &str,
        f: impl Fn(&mut EntityOpContext<'_>, &Payload, &Payload) -> (Payload, Payload) + Send + Sync + 'static,
    ) -> Self {
        self.operations.insert(name.into(), Arc::new(f));
        self
    }
}

impl std::fmt::Debug for EntityDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntityDefinition")
            .field("name", &self.name)
            .field("operations", &self.operations.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Lets an operation send one-way signals to other entities.
pub struct EntityOpContext<'a> {
    self_id: &'a InstanceId,
    signals: Vec<OutgoingMessage>,
}

impl EntityOpContext<'_> {
    pub fn instance_id(&self) -> &InstanceId {
        self.self_id
    }

    pub fn signal(&mut self, target: &InstanceId, op: &str, input: &str) {
        self.signals.push(OutgoingMessage {
            target: target.clone(),
            body: InstanceBody::EntityOp {
                op_id: 0,
                op_name: op.into(),
                input: input.into(),
                reply_to: None,
                lock: None,
            },
        });
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PendingRequest {
    Op { op_id: u64, op_name: String, input: Payload, reply_to: Option<InstanceId>, lock: Option<LockId> },
    Lock { lock: LockId, op_id: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLock {
    pub holder: LockId,
    /// Deferred operations and lock requests, served FIFO on release.
    pub queue: VecDeque<PendingRequest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRuntimeState {
    pub user_state: Payload,
    pub lock: Option<EntityLock>,
}

impl EntityRuntimeState {
    pub fn new(initial: Payload) -> Self {
        Self { user_state: initial, lock: None }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum EntityError {
    #[error("entity {entity} has no operation `{op}`")]
    UnknownOperation { entity: String, op: String },
}

struct Exec<'a> {
    def: &'a EntityDefinition,
    self_id: &'a InstanceId,
    strict: bool,
    out: Vec<OutgoingMessage>,
}

impl Exec<'_> {
    fn run_op(
        &mut self,
        state: &mut EntityRuntimeState,
        op_id: u64,
        op_name: &str,
        input: &Payload,
        reply_to: Option<InstanceId>,
    ) -> Result<(), EntityError> {
        let result = match self.def.operations.get(op_name) {
            Some(f) => {
                let mut ctx = EntityOpContext { self_id: self.self_id, signals: Vec::new() };
                let (next, result) = f(&mut ctx, &state.user_state, input);
                state.user_state = next;
                self.out.append(&mut ctx.signals);
                result
            }
            None if self.strict => {
                return Err(EntityError::UnknownOperation { entity: self.def.name.clone(), op: op_name.into() })
            }
            None => format!("error:unknown operation {op_name}"),
        };
        if let Some(to) = reply_to {
            self.out.push(OutgoingMessage { target: to, body: InstanceBody::EntityResult { op_id, result } });
        }
        Ok(())
    }

    fn grant(&mut self, state: &mut EntityRuntimeState, lock: LockId, op_id: u64, queue: VecDeque<PendingRequest>) {
        self.out.push(OutgoingMessage { target: lock.holder.clone(), body: InstanceBody::LockGranted { op_id } });
        state.lock = Some(EntityLock { holder: lock, queue });
    }

    fn handle(&mut self, state: &mut EntityRuntimeState, req: PendingRequest) -> Result<(), EntityError> {
        match (req, &mut state.lock) {
            (PendingRequest::Op { op_id, op_name, input, reply_to, .. }, None) => {
                self.run_op(state, op_id, &op_name, &input, reply_to)
            }
            (PendingRequest::Op { op_id, op_name, input, reply_to, lock }, Some(l)) => {
                if lock.as_ref() == Some(&l.holder) {
                    self.run_op(state, op_id, &op_name, &input, reply_to)
                } else {
                    l.queue.push_back(PendingRequest::Op { op_id, op_name, input, reply_to, lock });
                    Ok(())
                }
            }
            (PendingRequest::Lock { lock, op_id }, None) => {
                self.grant(state, lock, op_id, VecDeque::new());
                Ok(())
            }
            (req @ PendingRequest::Lock { .. }, Some(l)) => {
                l.queue.push_back(req);
                Ok(())
            }
        }
    }

    fn release(&mut self, state: &mut EntityRuntimeState, lock: &LockId) -> Result<(), EntityError> {
        if state.lock.as_ref().map(|l| &l.holder) != Some(lock) {
            return Ok(());
        }
        let mut queue = state.lock.take().map(|l| l.queue).unwrap_or_default();
        while let Some(req) = queue.pop_front() {
            match req {
                PendingRequest::Lock { lock, op_id } => {
                    self.grant(state, lock, op_id, queue);
                    return Ok(());
                }
                PendingRequest::Op { op_id, op_name, input, reply_to, .. } => {
                    self.run_op(state, op_id, &op_name, &input, reply_to)?;
                }
            }
        }
        Ok(())
    }
}

/// Applies a batch of arrivals to an entity in order. In lenient mode an
/// unknown operation is answered with an `error:` result instead of failing
/// the whole step.
pub fn execute_entity_step(
    def: &EntityDefinition,
    self_id: &InstanceId,
    state: &EntityRuntimeState,
    arrivals: &[Message],
    strict: bool,
) -> Result<(EntityRuntimeState, Vec<OutgoingMessage>), EntityError> {
    let mut state = state.clone();
    let mut exec = Exec { def, self_id, strict, out: Vec::new() };
    for m in arrivals {
        match m.body() {
            Some(InstanceBody::EntityOp { op_id, op_name, input, reply_to, lock }) => {
                let req = PendingRequest::Op {
                    op_id: *op_id,
                    op_name: op_name.clone(),
                    input: input.clone(),
                    reply_to: reply_to.clone(),
                    lock: lock.clone(),
                };
                exec.handle(&mut state, req)?;
            }
            Some(InstanceBody::LockRequest { lock, op_id }) => {
                exec.handle(&mut state, PendingRequest::Lock { lock: lock.clone(), op_id: *op_id })?;
            }
            Some(InstanceBody::LockRelease { lock }) => exec.release(&mut state, lock)?,
            _ => {}
        }
    }
    Ok((state, exec.out))
}
