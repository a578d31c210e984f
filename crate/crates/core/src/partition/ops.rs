use std::collections::{BTreeMap, BTreeSet};

use super::{
    partition_of, InstanceUpdate, MessagesReceived, MessagesSent, OutboundMessage, PartitionError, PartitionEvent,
    PartitionState, SessionEntry, StepCompleted,
};
use crate::model::{InstanceId, LogPosition, Message, MessageIdAllocator, MessageKind, SourceId};
use crate::orchestration::{InstanceKind, OutgoingMessage, TaskRequest};
use crate::speculation::{SpeculationMode, SpeculationTag};
use crate::transport::{Envelope, EnvelopePayload};

/// Builds the MessagesReceived record for a contiguous run of queue entries.
/// Duplicates (by source and sequence number) and envelopes rejected by
/// `is_aborted` still advance the position but are not admitted. Control
/// envelopes are never admitted.
pub fn ingest_input(
    state: &PartitionState,
    entries: &[(u64, Envelope)],
    is_aborted: impl Fn(&Envelope) -> bool,
) -> Result<PartitionEvent, PartitionError> {
    let mut expected = state.input.queue_position;
    let mut seen: BTreeMap<SourceId, u64> = BTreeMap::new();
    let mut admitted = Vec::new();
    for (pos, env) in entries {
        if *pos != expected {
            return Err(PartitionError::QueueGap { expected, got: *pos });
        }
        expected += 1;
        let EnvelopePayload::Message(message) = &env.payload else { continue };
        if is_aborted(env) {
            continue;
        }
        let high = seen.get(&env.source).copied().unwrap_or_else(|| state.input.dedup.get(&env.source));
        if env.seq <= high {
            continue;
        }
        seen.insert(env.source, env.seq);
        admitted.push(message.clone());
    }
    Ok(PartitionEvent::MessagesReceived(MessagesReceived {
        admitted,
        new_position: expected,
        dedup_updates: seen.into_iter().collect(),
    }))
}

/// Picks the idle instance holding the oldest released message and returns
/// its longest released prefix as one batch.
pub fn next_step(
    state: &PartitionState,
    busy: &BTreeSet<InstanceId>,
    released: impl Fn(&SessionEntry) -> bool,
) -> Option<(InstanceId, Vec<Message>)> {
    let (id, _) = state
        .sessions
        .iter()
        .filter(|(id, s)| !busy.contains(*id) && s.front().is_some_and(&released))
        .min_by_key(|(_, s)| s.front().map(|e| e.arrival))?;
    let batch = state.sessions[id].iter().take_while(|e| released(e)).map(|e| e.message.clone()).collect();
    Some((id.clone(), batch))
}

/// The result of running user code for one step, before the partition has
/// assigned identities.
#[derive(Clone, Debug)]
pub struct StepUpdate {
    pub kind: InstanceKind,
    pub update: InstanceUpdate,
    pub messages: Vec<OutgoingMessage>,
    pub tasks: Vec<TaskRequest>,
}

/// Turns a step's outcome into a StepCompleted record, assigning message
/// ids, per-target sequence numbers and task ids.
pub fn complete_step(
    state: &PartitionState,
    busy: &BTreeSet<InstanceId>,
    instance: &InstanceId,
    consumed: u32,
    outcome: StepUpdate,
    ids: &mut MessageIdAllocator,
    partitions: u32,
) -> Result<PartitionEvent, PartitionError> {
    if !busy.contains(instance) {
        return Err(PartitionError::NoStepInProgress(instance.clone()));
    }
    let mut produced_local = Vec::new();
    let mut produced_remote = Vec::new();
    let mut next_seq = state.outbox.next_seq.clone();
    for out in outcome.messages {
        let target_partition = partition_of(&out.target, partitions);
        let message = Message::instance(ids.next_id(), out.target, out.body);
        if target_partition == state.partition_id {
            produced_local.push(message);
        } else {
            let seq = next_seq.entry(target_partition).or_insert(1);
            produced_remote.push(OutboundMessage { target_partition, seq: *seq, message });
            *seq += 1;
        }
    }
    let produced_tasks = outcome
        .tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let kind = MessageKind::Task {
                task_name: t.task_name,
                input: t.input,
                respond_to: instance.clone(),
                call_id: t.task_id,
            };
            (state.next_task_id + i as u64, Message { id: ids.next_id(), kind })
        })
        .collect();
    Ok(PartitionEvent::StepCompleted(StepCompleted {
        instance: instance.clone(),
        kind: outcome.kind,
        consumed,
        update: outcome.update,
        produced_local,
        produced_remote,
        produced_tasks,
    }))
}

/// Envelopes that may leave the partition now, and the MessagesSent record
/// covering them. Conservative and Local modes only release entries whose
/// origin is durable; Global releases everything, tagged.
pub fn drain_outbox(
    state: &PartitionState,
    persisted_up_to: Option<LogPosition>,
    mode: SpeculationMode,
    incarnation: u32,
) -> (Vec<Envelope>, Option<PartitionEvent>) {
    let mut out = Vec::new();
    let mut through = None;
    for entry in &state.outbox.entries {
        let tag = match mode {
            SpeculationMode::Global => Some(SpeculationTag {
                source_partition: state.partition_id,
                incarnation,
                origin_logpos: entry.origin_logpos,
            }),
            _ if persisted_up_to.is_some_and(|p| entry.origin_logpos <= p) => None,
            _ => break,
        };
        for m in &entry.messages {
            out.push(Envelope {
                target_partition: m.target_partition,
                source: SourceId::Partition(state.partition_id),
                seq: m.seq,
                payload: EnvelopePayload::Message(m.message.clone()),
                speculation_tag: tag,
                known_incarnation: 0,
            });
        }
        through = Some(entry.origin_logpos);
    }
    let event = through.map(|through| PartitionEvent::MessagesSent(MessagesSent { through }));
    (out, event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InstanceBody, MessageId};
    use crate::partition::{InstanceData, OutboxEntry, PendingTask, TaskCompleted};

    fn mid(origin: SourceId, n: u64) -> MessageId {
        MessageId { origin, incarnation: 0, counter: n }
    }

    fn to(target: &InstanceId, n: u64) -> Message {
        Message::instance(
            mid(SourceId::Client(9), n),
            target.clone(),
            InstanceBody::Start { orchestration: target.name.clone(), input: String::new() },
        )
    }

    fn env(source: SourceId, seq: u64, m: Message) -> Envelope {
        Envelope { target_partition: 0, source, seq, payload: EnvelopePayload::Message(m), speculation_tag: None, known_incarnation: 0 }
    }

    fn received(state: &mut PartitionState, ev: &PartitionEvent) {
        let pos = state.applied_through.map_or(LogPosition(0), LogPosition::next);
        state.apply_event(pos, ev).unwrap();
    }

    #[test]
    fn fresh_batch_advances_dedup() {
        let mut s = PartitionState::new(0);
        s.input.dedup.0.insert(SourceId::Partition(2), 4);
        let a = InstanceId::new("A", "1");
        let entries: Vec<_> = (5..8).enumerate().map(|(i, seq)| (i as u64, env(SourceId::Partition(2), seq, to(&a, seq)))).collect();
        let ev = ingest_input(&s, &entries, |_| false).unwrap();
        received(&mut s, &ev);
        assert_eq!(s.input.dedup.get(&SourceId::Partition(2)), 7);
        assert_eq!(s.input.queue_position, 3);
        assert_eq!(s.pending_messages(), 3);

        // redelivery of seq 6 consumes a position but admits nothing
        let ev = ingest_input(&s, &[(3, env(SourceId::Partition(2), 6, to(&a, 6)))], |_| false).unwrap();
        match &ev {
            PartitionEvent::MessagesReceived(r) => {
                assert!(r.admitted.is_empty());
                assert_eq!(r.new_position, 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_sources_get_two_dedup_entries() {
        let s = PartitionState::new(0);
        let a = InstanceId::new("A", "1");
        let entries = vec![(0, env(SourceId::Client(1), 1, to(&a, 1))), (1, env(SourceId::Partition(3), 1, to(&a, 2)))];
        let PartitionEvent::MessagesReceived(r) = ingest_input(&s, &entries, |_| false).unwrap() else { panic!() };
        assert_eq!(r.admitted.len(), 2);
        assert_eq!(r.dedup_updates.len(), 2);
    }

    #[test]
    fn queue_gap() {
        let s = PartitionState::new(0);
        let a = InstanceId::new("A", "1");
        assert_eq!(
            ingest_input(&s, &[(2, env(SourceId::Client(1), 1, to(&a, 1)))], |_| false),
            Err(PartitionError::QueueGap { expected: 0, got: 2 })
        );
    }

    #[test]
    fn oldest_message_wins_and_busy_is_skipped() {
        let mut s = PartitionState::new(0);
        let (a, b) = (InstanceId::new("A", "1"), InstanceId::new("B", "1"));
        let entries = vec![
            (0, env(SourceId::Client(1), 1, to(&b, 2))),
            (1, env(SourceId::Client(1), 2, to(&a, 1))),
            (2, env(SourceId::Client(1), 3, to(&b, 3))),
        ];
        let ev = ingest_input(&s, &entries, |_| false).unwrap();
        received(&mut s, &ev);
        let (id, batch) = next_step(&s, &BTreeSet::new(), |_| true).unwrap();
        assert_eq!(id, b);
        assert_eq!(batch.len(), 2);
        let (id, _) = next_step(&s, &BTreeSet::from([b.clone()]), |_| true).unwrap();
        assert_eq!(id, a);
        assert!(next_step(&s, &BTreeSet::from([a, b]), |_| true).is_none());
        assert!(next_step(&PartitionState::new(0), &BTreeSet::new(), |_| true).is_none());
    }

    #[test]
    fn outbox_drain_per_mode() {
        let mut s = PartitionState::new(1);
        let b = InstanceId::new("B", "x");
        for (pos, seq) in [(10, 1), (12, 2)] {
            s.outbox.entries.push_back(OutboxEntry {
                origin_logpos: LogPosition(pos),
                messages: vec![OutboundMessage { target_partition: 2, seq, message: to(&b, seq) }],
            });
        }
        let (sent, ev) = drain_outbox(&s, Some(LogPosition(10)), SpeculationMode::Local, 1);
        assert_eq!(sent.len(), 1);
        assert_eq!(ev, Some(PartitionEvent::MessagesSent(MessagesSent { through: LogPosition(10) })));
        let (sent, _) = drain_outbox(&s, Some(LogPosition(10)), SpeculationMode::Global, 1);
        let tags: Vec<_> = sent.iter().map(|e| e.speculation_tag.unwrap().origin_logpos.0).collect();
        assert_eq!(tags, vec![10, 12]);
        let (sent, ev) = drain_outbox(&PartitionState::new(1), None, SpeculationMode::Global, 1);
        assert!(sent.is_empty() && ev.is_none());
    }

    #[test]
    fn step_and_task_updates() {
        use crate::orchestration::{HistoryEvent, HistoryEventKind};
        let mut s = PartitionState::new(0);
        let a = InstanceId::new("SimpleSequence", "a");
        let ev = ingest_input(&s, &[(0, env(SourceId::Client(1), 1, to(&a, 1)))], |_| false).unwrap();
        received(&mut s, &ev);
        let busy = BTreeSet::from([a.clone()]);
        let mut ids = MessageIdAllocator::new(SourceId::Partition(0), 1);
        let update = StepUpdate {
            kind: InstanceKind::Orchestration,
            update: InstanceUpdate::Orchestration {
                new_events: vec![
                    HistoryEvent { seq: 0, kind: HistoryEventKind::ExecutionStarted { orchestration_name: "SimpleSequence".into(), input: "x".into() } },
                    HistoryEvent { seq: 1, kind: HistoryEventKind::TaskScheduled { task_id: 0, task_name: "F1".into(), input: "x".into() } },
                ],
            },
            messages: vec![],
            tasks: vec![TaskRequest { task_id: 0, task_name: "F1".into(), input: "x".into() }],
        };
        assert_eq!(
            complete_step(&s, &BTreeSet::new(), &a, 1, update.clone(), &mut ids, 1),
            Err(PartitionError::NoStepInProgress(a.clone()))
        );
        let ev = complete_step(&s, &busy, &a, 1, update, &mut ids, 1).unwrap();
        received(&mut s, &ev);
        assert!(s.sessions.is_empty());
        assert_eq!(s.tasks.len(), 1);
        match s.instance_data(&a) {
            Some(InstanceData::Orchestration { history }) => assert_eq!(history.len(), 2),
            other => panic!("{other:?}"),
        }
        let PendingTask { message, .. } = &s.tasks[&0];
        assert!(matches!(&message.kind, MessageKind::Task { task_name, call_id: 0, .. } if task_name == "F1"));
        let response = Message::instance(ids.next_id(), a.clone(), InstanceBody::TaskResult { call_id: 0, result: "y".into() });
        received(&mut s, &PartitionEvent::TaskCompleted(TaskCompleted { task_id: 0, response }));
        assert!(s.tasks.is_empty());
        assert_eq!(s.pending_messages(), 1);

        let bad = PartitionEvent::TaskCompleted(TaskCompleted { task_id: 7, response: to(&a, 3) });
        let pos = s.applied_through.unwrap().next();
        assert_eq!(s.apply_event(pos, &bad), Err(PartitionError::UnknownTaskId(7)));
        assert!(matches!(s.apply_event(LogPosition(99), &bad), Err(PartitionError::NonContiguousEvent { .. })));
    }
}
