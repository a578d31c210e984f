//! Property tests over the public API: graph invariants, replay, entities,
//! dedup, storage and whole simulations.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use durable_core::cluster::{run_simulation, FaultPlan, Load, SimConfig};
use durable_core::model::{
    ConsistencyLevel, ExecutionGraph, GraphError, InstanceBody, InstanceId, LockId, LogPosition, Message, MessageId,
    ProgressState, SourceId, VertexId, VertexKind,
};
use durable_core::orchestration::{
    execute_entity_step, execute_orchestration_step, EntityRuntimeState, HistoryEvent, HistoryEventKind, StepStatus,
};
use durable_core::partition::{ingest_input, InstanceData, PartitionEvent, PartitionState};
use durable_core::speculation::SpeculationMode;
use durable_core::storage::{BlobStore, MemBlobStore, Storage, StorageError, LEASE_DURATION_US};
use durable_core::transport::{Envelope, EnvelopePayload, Transport};
use durable_core::workloads::{self, Workload, ACCOUNT, HELLO_SEQUENCE};

const STATES: [ProgressState; 4] =
    [ProgressState::InProgress, ProgressState::Completed, ProgressState::Persisted, ProgressState::Aborted];

fn mid(counter: u64) -> MessageId {
    MessageId { origin: SourceId::Client(0), incarnation: 0, counter }
}

/// One vertex to add: `(selector, picks, produced)`. Picks index into the
/// messages still unconsumed.
type VertexPlan = (u8, Vec<usize>, u8);

fn plans() -> impl Strategy<Value = Vec<VertexPlan>> {
    prop::collection::vec((any::<u8>(), prop::collection::vec(any::<usize>(), 1..4), 0u8..4), 1..40)
}

/// Builds a graph whose vertex ids come out in a topological order.
fn build(plan: &[VertexPlan]) -> ExecutionGraph {
    let mut g = ExecutionGraph::new();
    let mut unconsumed: Vec<MessageId> = Vec::new();
    let mut counter = 0;
    let mut ordinals: BTreeMap<u8, u64> = BTreeMap::new();
    for (sel, picks, produced) in plan {
        let mut fresh = |n: u8| -> Vec<MessageId> {
            (0..n)
                .map(|_| {
                    counter += 1;
                    mid(counter)
                })
                .collect()
        };
        if unconsumed.is_empty() || sel % 4 == 0 {
            let out = fresh((*produced).max(1));
            g.record_work_item(VertexKind::Input, &[], &out).unwrap();
            unconsumed.extend(out);
            continue;
        }
        let mut idx: Vec<usize> = picks.iter().map(|p| p % unconsumed.len()).collect();
        idx.sort_unstable();
        idx.dedup();
        let consumed: Vec<MessageId> = idx.iter().rev().map(|i| unconsumed.remove(*i)).collect();
        let out = fresh(*produced);
        let instance = sel % 3;
        let ordinal = ordinals.entry(instance).or_insert(0);
        *ordinal += 1;
        let kind = VertexKind::Step { instance: InstanceId::new("I", instance.to_string()), ordinal: *ordinal };
        g.record_work_item(kind, &consumed, &out).unwrap();
        unconsumed.extend(out);
    }
    g
}

fn rank(p: ProgressState) -> u8 {
    match p {
        ProgressState::Persisted => 2,
        ProgressState::Completed => 1,
        _ => 0,
    }
}

fn drive_to(g: &mut ExecutionGraph, v: VertexId, to: ProgressState) {
    if to != ProgressState::InProgress {
        g.advance_progress(v, ProgressState::Completed).unwrap();
    }
    if to == ProgressState::Persisted {
        g.advance_progress(v, ProgressState::Persisted).unwrap();
    }
}

/// Independent forward reachability over the public edge sets.
fn reachable(g: &ExecutionGraph, from: VertexId) -> BTreeSet<VertexId> {
    let edges: Vec<(VertexId, VertexId)> = g
        .message_edges()
        .iter()
        .map(|(a, b, _)| (*a, *b))
        .chain(g.successor_edges().iter().copied())
        .collect();
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        for (a, b) in &edges {
            if *a == v && seen.insert(*b) {
                stack.push(*b);
            }
        }
    }
    seen
}

proptest! {
    #[test]
    fn transitions_follow_the_automaton(path in prop::collection::vec(0usize..4, 1..8)) {
        let mut g = ExecutionGraph::new();
        g.record_work_item(VertexKind::Input, &[], &[mid(1)]).unwrap();
        let v = g.record_work_item(VertexKind::Task { task_name: "t".into() }, &[mid(1)], &[]).unwrap();
        let mut current = ProgressState::InProgress;
        for i in path {
            let to = STATES[i];
            let allowed = matches!(
                (current, to),
                (ProgressState::InProgress, ProgressState::Completed)
                    | (ProgressState::InProgress, ProgressState::Aborted)
                    | (ProgressState::Completed, ProgressState::Persisted)
                    | (ProgressState::Completed, ProgressState::Aborted)
            );
            match g.advance_progress(v, to) {
                Ok(()) => {
                    prop_assert!(allowed, "{current:?} -> {to:?} was accepted");
                    current = to;
                }
                Err(GraphError::IllegalTransition { .. }) => prop_assert!(!allowed, "{current:?} -> {to:?} was refused"),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            prop_assert_eq!(g.vertex(v).unwrap().progress, current);
        }
    }

    #[test]
    fn persisted_vertices_never_change(plan in plans(), targets in prop::collection::vec(0usize..4, 40), aborts in prop::collection::vec(any::<usize>(), 0..10)) {
        let mut g = build(&plan);
        let ids: Vec<VertexId> = g.vertices().filter(|v| v.kind.is_work_item()).map(|v| v.id).collect();
        for (v, t) in ids.iter().zip(&targets) {
            drive_to(&mut g, *v, STATES[*t % 3]);
        }
        let persisted: Vec<VertexId> = g.vertices().filter(|v| v.progress == ProgressState::Persisted).map(|v| v.id).collect();
        for a in aborts {
            if ids.is_empty() {
                break;
            }
            let _ = g.abort(ids[a % ids.len()]);
            for p in &persisted {
                let _ = g.advance_progress(*p, ProgressState::Aborted);
                let _ = g.advance_progress(*p, ProgressState::Completed);
            }
        }
        for p in &persisted {
            prop_assert_eq!(g.vertex(*p).unwrap().progress, ProgressState::Persisted);
        }
    }

    #[test]
    fn single_consumption_holds_at_all_times(plan in plans(), extra in prop::collection::vec((any::<usize>(), any::<bool>()), 0..30)) {
        let mut g = build(&plan);
        let messages: Vec<MessageId> = g.vertices().flat_map(|v| v.produced.clone()).collect();
        let check = |g: &ExecutionGraph| {
            let mut live: BTreeMap<MessageId, usize> = BTreeMap::new();
            for v in g.vertices().filter(|v| v.progress != ProgressState::Aborted) {
                for m in &v.consumed {
                    *live.entry(*m).or_default() += 1;
                }
            }
            live.values().all(|n| *n <= 1)
        };
        prop_assert!(check(&g));
        for (i, abort_first) in extra {
            let m = messages[i % messages.len()];
            if abort_first {
                if let Some(c) = g.consumers_of(&m).first().copied() {
                    let _ = g.abort(c);
                }
            }
            let _ = g.record_work_item(VertexKind::Task { task_name: "again".into() }, &[m], &[]);
            prop_assert!(check(&g));
        }
    }

    #[test]
    fn consistency_levels_nest(plan in plans(), targets in prop::collection::vec(0usize..3, 40), abort in prop::option::of(any::<usize>())) {
        let mut g = build(&plan);
        let ids: Vec<VertexId> = g.vertices().map(|v| v.id).collect();
        for (v, t) in ids.iter().zip(targets.iter().cycle()) {
            if !g.vertex(*v).unwrap().kind.is_work_item() {
                continue;
            }
            // never more advanced than anything it depends on
            let cap = g.predecessors(*v).iter().map(|p| rank(g.vertex(*p).unwrap().progress)).min().unwrap_or(2);
            let want = [ProgressState::InProgress, ProgressState::Completed, ProgressState::Persisted][(*t).min(cap as usize)];
            drive_to(&mut g, *v, want);
        }
        if let Some(a) = abort {
            let open: Vec<VertexId> = g.vertices().filter(|v| v.progress != ProgressState::Persisted).map(|v| v.id).collect();
            if !open.is_empty() {
                g.abort(open[a % open.len()]).unwrap();
            }
        }
        let all = g.check_consistency(&[ConsistencyLevel::InProgress]);
        prop_assert!(all.passed(), "{:?}", all.violations);
        prop_assert!(g.check_consistency(&[ConsistencyLevel::Completed]).passed());
        prop_assert!(g.check_consistency(&[ConsistencyLevel::Persisted]).passed());
        prop_assert!(g.check_ccc_properties().passed());
    }

    #[test]
    fn abort_closure_matches_reachability(plan in plans(), targets in prop::collection::vec(0usize..3, 40)) {
        let mut g = build(&plan);
        let ids: Vec<VertexId> = g.vertices().filter(|v| v.kind.is_work_item()).map(|v| v.id).collect();
        for (v, t) in ids.iter().zip(targets.iter().cycle()) {
            drive_to(&mut g, *v, STATES[*t]);
        }
        for v in &ids {
            let reach = reachable(&g, *v);
            let hits_persisted = reach.iter().any(|r| g.vertex(*r).unwrap().progress == ProgressState::Persisted);
            match g.abort_closure(*v) {
                Ok(closure) => {
                    prop_assert!(!hits_persisted);
                    prop_assert_eq!(closure, reach);
                }
                Err(GraphError::PersistedDependsOnAborted { .. }) => prop_assert!(hits_persisted),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}

fn task_result(counter: u64, instance: &InstanceId, call_id: u64, result: String) -> Message {
    Message::instance(mid(counter), instance.clone(), InstanceBody::TaskResult { call_id, result })
}

/// Runs an orchestration to completion, answering task `i` with `r{i}`, and
/// returns its history and how often each task was requested.
fn run_to_completion(def: &durable_core::orchestration::WorkflowDefinition, input: &str) -> (Vec<HistoryEvent>, BTreeMap<u64, u32>) {
    let id = InstanceId::new(def.name.clone(), "x");
    let mut history = Vec::new();
    let mut arrivals =
        vec![Message::instance(mid(0), id.clone(), InstanceBody::Start { orchestration: def.name.clone(), input: input.into() })];
    let mut requested: BTreeMap<u64, u32> = BTreeMap::new();
    for round in 1.. {
        let step = execute_orchestration_step(def, &id, &history, &arrivals, 1000).unwrap();
        history.extend(step.new_history_events);
        if matches!(step.status, StepStatus::Completed { .. }) {
            break;
        }
        arrivals = step
            .produced_tasks
            .iter()
            .map(|t| {
                *requested.entry(t.task_id).or_default() += 1;
                task_result(round, &id, t.task_id, format!("r{}", t.task_id))
            })
            .collect();
        assert!(round < 100);
    }
    (history, requested)
}

fn emitted(kind: &HistoryEventKind) -> bool {
    kind.is_scheduling() || matches!(kind, HistoryEventKind::ExecutionCompleted { .. })
}

proptest! {
    #[test]
    fn replay_re_emits_the_recorded_schedule(length in 0u32..12) {
        let def = workloads::task_sequence();
        let (history, requested) = run_to_completion(&def, &length.to_string());
        prop_assert_eq!(history.len(), 2 * (length as usize + 1) + 2);
        prop_assert!(requested.values().all(|n| *n == 1));
        prop_assert_eq!(requested.len(), length as usize + 1);
        let id = InstanceId::new(def.name.clone(), "x");
        for cut in 1..history.len() {
            if !emitted(&history[cut].kind) || emitted(&history[cut - 1].kind) {
                continue;
            }
            let step = execute_orchestration_step(&def, &id, &history[..cut], &[], 1000).unwrap();
            prop_assert!(!step.new_history_events.is_empty());
            let n = step.new_history_events.len();
            prop_assert_eq!(
                bincode::serialize(&step.new_history_events).unwrap(),
                bincode::serialize(&history[cut..cut + n]).unwrap()
            );
        }
    }

    #[test]
    fn entity_ops_apply_in_arrival_order(deltas in prop::collection::vec(-50i64..50, 1..40), cuts in prop::collection::vec(any::<bool>(), 40)) {
        let def = workloads::account(100);
        let id = InstanceId::new(ACCOUNT, "a");
        let caller = InstanceId::new("Probe", "p");
        let mut messages = Vec::new();
        for (i, d) in deltas.iter().enumerate() {
            let op = |name: &str, input: String, reply: Option<InstanceId>, n: u64| {
                Message::instance(mid(n), id.clone(), InstanceBody::EntityOp { op_id: n, op_name: name.into(), input, reply_to: reply, lock: None })
            };
            messages.push(op("Modify", d.to_string(), None, 2 * i as u64));
            messages.push(op("Get", String::new(), Some(caller.clone()), 2 * i as u64 + 1));
        }
        let mut state = EntityRuntimeState::new("100".into());
        let mut replies = Vec::new();
        let mut batch = Vec::new();
        for (i, m) in messages.into_iter().enumerate() {
            batch.push(m);
            if cuts[i % cuts.len()] {
                let (next, out) = execute_entity_step(&def, &id, &state, &batch, true).unwrap();
                state = next;
                replies.extend(out);
                batch.clear();
            }
        }
        let (state, out) = execute_entity_step(&def, &id, &state, &batch, true).unwrap();
        replies.extend(out);
        let mut running = 100;
        let mut expected = Vec::new();
        for d in &deltas {
            running += d;
            expected.push(running.to_string());
        }
        let got: Vec<String> = replies
            .iter()
            .map(|o| match &o.body {
                InstanceBody::EntityResult { result, .. } => result.clone(),
                other => panic!("{other:?}"),
            })
            .collect();
        prop_assert_eq!(got, expected);
        prop_assert_eq!(state.user_state, running.to_string());
    }

    #[test]
    fn others_wait_while_a_lock_is_held(outside in prop::collection::vec(-20i64..20, 0..10), inside in prop::collection::vec(-20i64..20, 0..10)) {
        let def = workloads::account(0);
        let id = InstanceId::new(ACCOUNT, "a");
        let holder = InstanceId::new("Transfer", "t");
        let lock = LockId { holder: holder.clone(), seq: 0 };
        let modify = |n: u64, d: i64, lock: Option<LockId>| {
            Message::instance(mid(n), id.clone(), InstanceBody::EntityOp { op_id: n, op_name: "Modify".into(), input: d.to_string(), reply_to: None, lock })
        };
        let mut msgs = vec![Message::instance(mid(0), id.clone(), InstanceBody::LockRequest { lock: lock.clone(), op_id: 0 })];
        msgs.extend(outside.iter().enumerate().map(|(i, d)| modify(100 + i as u64, *d, None)));
        msgs.extend(inside.iter().enumerate().map(|(i, d)| modify(200 + i as u64, *d, Some(lock.clone()))));
        let probe = Message::instance(mid(1), id.clone(), InstanceBody::EntityOp { op_id: 1, op_name: "Get".into(), input: String::new(), reply_to: Some(holder.clone()), lock: Some(lock.clone()) });
        msgs.push(probe);
        let (held, _) = execute_entity_step(&def, &id, &EntityRuntimeState::new("0".into()), &msgs, true).unwrap();
        // only the holder's operations ran
        prop_assert_eq!(&held.user_state, &inside.iter().sum::<i64>().to_string());
        let release = Message::instance(mid(2), id.clone(), InstanceBody::LockRelease { lock });
        let (after, _) = execute_entity_step(&def, &id, &held, &[release], true).unwrap();
        prop_assert!(after.lock.is_none());
        prop_assert_eq!(after.user_state, (inside.iter().sum::<i64>() + outside.iter().sum::<i64>()).to_string());
    }

    #[test]
    fn redelivered_messages_enter_once(counts in (1u64..20, 1u64..20), dups in prop::collection::vec((any::<bool>(), any::<u64>(), any::<usize>()), 0..30), batches in prop::collection::vec(1usize..6, 1..20)) {
        let target = InstanceId::new("E", "e");
        let envelope = |source: u32, seq: u64| Envelope {
            target_partition: 0,
            source: SourceId::Client(source),
            seq,
            payload: EnvelopePayload::Message(Message::instance(
                MessageId { origin: SourceId::Client(source), incarnation: 0, counter: seq },
                target.clone(),
                InstanceBody::Start { orchestration: "E".into(), input: String::new() },
            )),
            speculation_tag: None,
            known_incarnation: 0,
        };
        let mut queue: Vec<Envelope> = Vec::new();
        let (mut a, mut b) = (1, 1);
        while a <= counts.0 || b <= counts.1 {
            if a <= counts.0 && (b > counts.1 || (a + b) % 3 != 0) {
                queue.push(envelope(0, a));
                a += 1;
            } else {
                queue.push(envelope(1, b));
                b += 1;
            }
        }
        // a duplicate lands somewhere after its original
        for (src, seq, at) in dups {
            let (source, n) = if src { (0, counts.0) } else { (1, counts.1) };
            let seq = 1 + seq % n;
            let orig = queue.iter().position(|e| e.source == SourceId::Client(source) && e.seq == seq).unwrap();
            let at = orig + 1 + at % (queue.len() - orig);
            queue.insert(at, envelope(source, seq));
        }
        let entries: Vec<(u64, Envelope)> = queue.into_iter().enumerate().map(|(i, e)| (i as u64, e)).collect();
        let mut state = PartitionState::new(0);
        let mut admitted = Vec::new();
        let (mut i, mut pos) = (0, 0);
        for n in batches.iter().cycle() {
            if i >= entries.len() {
                break;
            }
            let end = (i + n).min(entries.len());
            let event = ingest_input(&state, &entries[i..end], |_| false).unwrap();
            if let PartitionEvent::MessagesReceived(r) = &event {
                admitted.extend(r.admitted.iter().map(|m| m.id));
            }
            state.apply_event(LogPosition(pos), &event).unwrap();
            pos += 1;
            i = end;
        }
        let distinct: BTreeSet<MessageId> = admitted.iter().copied().collect();
        prop_assert_eq!(distinct.len(), admitted.len());
        prop_assert_eq!(admitted.len() as u64, counts.0 + counts.1);
        prop_assert_eq!(state.input.queue_position, entries.len() as u64);
    }
}

fn record(n: u64) -> PartitionEvent {
    let id = InstanceId::new("E", n.to_string());
    PartitionEvent::MessagesReceived(durable_core::partition::MessagesReceived {
        admitted: vec![Message::instance(mid(n), id, InstanceBody::Start { orchestration: "E".into(), input: String::new() })],
        new_position: n + 1,
        dedup_updates: vec![(SourceId::Client(0), n + 1)],
    })
}

proptest! {
    #[test]
    fn appended_records_survive_a_torn_tail(batches in prop::collection::vec(1u64..10, 1..20), junk in prop::collection::vec(any::<u8>(), 0..12)) {
        let blobs: Arc<dyn BlobStore> = Arc::new(MemBlobStore::new());
        let s = Storage::new(blobs.clone());
        let epoch = s.lease_acquire(0, 1, 0).unwrap();
        let mut written = Vec::new();
        for (i, n) in batches.iter().enumerate() {
            let first = written.len() as u64;
            let batch: Vec<PartitionEvent> = (first..first + n).map(record).collect();
            s.log_append(0, epoch, LogPosition(first), &batch).unwrap();
            written.extend(batch);
            // one durable write per call, whatever the batch size
            prop_assert_eq!(s.flush_count(0), i as u64 + 1);
        }
        blobs.append("p0/log", &junk).unwrap();
        let reopened = Storage::new(blobs);
        let read: Vec<PartitionEvent> = reopened.log_read(0, LogPosition(0)).unwrap().into_iter().map(|(_, e)| e).collect();
        prop_assert_eq!(read, written);
    }

    #[test]
    fn stale_epochs_are_fenced(before in 1u64..5, after in 1u64..5) {
        let s = Storage::in_memory();
        let old = s.lease_acquire(0, 1, 0).unwrap();
        s.log_append(0, old, LogPosition(0), &(0..before).map(record).collect::<Vec<_>>()).unwrap();
        let new = s.lease_acquire(0, 2, LEASE_DURATION_US + 1).unwrap();
        prop_assert!(new > old);
        s.log_append(0, new, LogPosition(before), &(before..before + after).map(record).collect::<Vec<_>>()).unwrap();
        let fenced = |r: Result<(), StorageError>| matches!(r, Err(StorageError::Fenced { .. }));
        prop_assert!(fenced(s.log_append(0, old, LogPosition(before + after), &[record(99)])));
        prop_assert!(fenced(s.log_truncate_after(0, old, None)));
        prop_assert!(fenced(s.checkpoint_write(0, old, &PartitionState::new(0))));
        prop_assert_eq!(s.log_tail(0).unwrap(), Some(LogPosition(before + after - 1)));
    }

    #[test]
    fn queues_keep_their_order_across_reopen(targets in prop::collection::vec(0u32..3, 1..40)) {
        let blobs: Arc<dyn BlobStore> = Arc::new(MemBlobStore::new());
        let t = Transport::new(blobs.clone());
        let mut sent: BTreeMap<u32, Vec<Envelope>> = BTreeMap::new();
        for (i, p) in targets.iter().enumerate() {
            let mut env = Envelope::control(*p, SourceId::Partition(9), EnvelopePayload::Message(Message::instance(
                mid(i as u64), InstanceId::new("E", "e"), InstanceBody::LockGranted { op_id: i as u64 })));
            env.seq = i as u64 + 1;
            let pos = t.qsend(env.clone()).unwrap();
            let q = sent.entry(*p).or_default();
            prop_assert_eq!(pos, q.len() as u64);
            q.push(env);
        }
        let reopened = Transport::new(blobs);
        for (p, q) in sent {
            let got: Vec<Envelope> = reopened.qreceive(p, 0, usize::MAX).unwrap().into_iter().map(|(_, e)| e).collect();
            prop_assert_eq!(got, q);
        }
    }
}

fn fold(log: &[(LogPosition, PartitionEvent)], p: u32) -> PartitionState {
    let mut s = PartitionState::new(p);
    for (pos, e) in log {
        s.apply_event(*pos, e).unwrap();
    }
    s
}

fn modes() -> impl Strategy<Value = SpeculationMode> {
    prop_oneof![Just(SpeculationMode::Conservative), Just(SpeculationMode::Local), Just(SpeculationMode::Global)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_and_recovery_equal_the_fold(seed in 1u64..1000, mode in modes()) {
        let cfg = SimConfig {
            seed,
            mode,
            partitions: 4,
            nodes: 2,
            start_nodes: 2,
            checkpoint_events: 16,
            load: Load::Open { requests: 30, rate: 100.0 },
            faults: FaultPlan::Random { probability: 0.002, until: 0.8 },
            ..SimConfig::default()
        };
        let out = run_simulation(&cfg).unwrap();
        let mut checked = 0;
        for p in 0..cfg.partitions {
            let log = out.storage.log_read(p, LogPosition(0)).unwrap();
            let (recovered, tail) = out.storage.recover(p).unwrap();
            prop_assert_eq!(tail.map(|t| t.0 + 1).unwrap_or(0), log.len() as u64);
            prop_assert_eq!(&recovered, &fold(&log, p));
            for name in out.storage.blobs().list(&format!("p{p}/chk-")).unwrap() {
                let pos: u64 = name.rsplit('-').next().unwrap().parse().unwrap();
                let chk = out.storage.checkpoint_read_latest(p, Some(LogPosition(pos))).unwrap().unwrap();
                prop_assert_eq!(chk.applied_through, Some(LogPosition(pos)));
                prop_assert_eq!(&chk, &fold(&log[..=pos as usize], p));
                checked += 1;
            }
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn hello_histories_have_the_fixed_shape(seed in 1u64..1000, mode in modes()) {
        let cfg = SimConfig {
            seed,
            mode,
            partitions: 4,
            nodes: 2,
            start_nodes: 2,
            load: Load::Open { requests: 20, rate: 100.0 },
            faults: FaultPlan::Random { probability: 0.002, until: 0.8 },
            ..SimConfig::default()
        };
        let out = run_simulation(&cfg).unwrap();
        prop_assert!(out.complete);
        let states = out.final_states().unwrap();
        let mut seen = 0;
        for s in &states {
            for id in s.instances.keys().filter(|id| id.name == HELLO_SEQUENCE) {
                let Some(InstanceData::Orchestration { history }) = s.instance_data(id) else { panic!("{id}") };
                let shape: Vec<&str> = history
                    .iter()
                    .map(|e| match e.kind {
                        HistoryEventKind::ExecutionStarted { .. } => "start",
                        HistoryEventKind::TaskScheduled { .. } => "sched",
                        HistoryEventKind::TaskCompleted { .. } => "done",
                        HistoryEventKind::ExecutionCompleted { .. } => "end",
                        _ => "other",
                    })
                    .collect();
                prop_assert_eq!(shape, ["start", "sched", "done", "sched", "done", "sched", "done", "end"]);
                seen += 1;
            }
        }
        prop_assert_eq!(seen, 20);
    }

    #[test]
    fn moving_partitions_changes_no_result(seed in 1u64..1000, mode in modes()) {
        let base = SimConfig {
            seed,
            mode,
            workload: Workload::TaskSeq { length: 4 },
            partitions: 8,
            load: Load::Open { requests: 40, rate: 100.0 },
            ..SimConfig::default()
        };
        let moved = SimConfig { start_nodes: 1, rebalance_at_us: Some(150_000), ..base.clone() };
        let a = run_simulation(&base).unwrap();
        let b = run_simulation(&moved).unwrap();
        prop_assert!(a.complete && b.complete);
        prop_assert!(b.moves > 0);
        let results = |o: &durable_core::cluster::SimOutput| -> Vec<(InstanceId, Option<String>)> {
            o.requests.iter().map(|r| (r.instance.clone(), r.result.clone())).collect()
        };
        prop_assert_eq!(results(&a), results(&b));
    }

    #[test]
    fn bank_money_is_conserved(seed in 1u64..1000, mode in modes(), rebalance in any::<bool>()) {
        let cfg = SimConfig {
            seed,
            mode,
            partitions: 8,
            start_nodes: if rebalance { 2 } else { 4 },
            rebalance_at_us: rebalance.then_some(200_000),
            workload: Workload::Bank { accounts: 8, initial_balance: 50, transfers: 40, max_amount: 40 },
            load: Load::Open { requests: 40, rate: 100.0 },
            faults: FaultPlan::Random { probability: 0.002, until: 0.8 },
            ..SimConfig::default()
        };
        let out = run_simulation(&cfg).unwrap();
        let a = durable_core::sweep::audit(&cfg, &out);
        prop_assert!(a.passed(), "{:?}", a.problems);
        prop_assert!(out.requests.iter().all(|r| matches!(r.result.as_deref(), Some("true" | "false"))));
    }
}
