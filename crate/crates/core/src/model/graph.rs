use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use super::{GraphError, InstanceId, MessageId, ProgressState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexId(pub u64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VertexKind {
    Input,
    Task { task_name: String },
    Step { instance: InstanceId, ordinal: u64 },
}

impl VertexKind {
    pub fn is_work_item(&self) -> bool {
        !matches!(self, VertexKind::Input)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionVertex {
    pub id: VertexId,
    pub kind: VertexKind,
    pub progress: ProgressState,
    pub consumed: Vec<MessageId>,
    pub produced: Vec<MessageId>,
}

/// Fault-augmented execution graph. Message edges point from producer to
/// consumer; successor edges link consecutive steps of one instance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionGraph {
    pub(super) vertices: BTreeMap<VertexId, ExecutionVertex>,
    pub(super) message_edges: BTreeSet<(VertexId, VertexId, MessageId)>,
    pub(super) successor_edges: BTreeSet<(VertexId, VertexId)>,
    pub(super) complete: bool,
    // indexes
    pub(super) producer: BTreeMap<MessageId, VertexId>,
    pub(super) consumers: BTreeMap<MessageId, Vec<VertexId>>,
    pub(super) steps: BTreeMap<InstanceId, BTreeMap<u64, Vec<VertexId>>>,
    next_vertex: u64,
}

impl ExecutionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vertex(&self, id: VertexId) -> Option<&ExecutionVertex> {
        self.vertices.get(&id)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &ExecutionVertex> {
        self.vertices.values()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn message_edges(&self) -> &BTreeSet<(VertexId, VertexId, MessageId)> {
        &self.message_edges
    }

    pub fn successor_edges(&self) -> &BTreeSet<(VertexId, VertexId)> {
        &self.successor_edges
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Completeness is a whole-run property and is asserted by the harness.
    pub fn set_complete(&mut self, complete: bool) {
        self.complete = complete;
    }

    pub fn producer_of(&self, message: &MessageId) -> Option<VertexId> {
        self.producer.get(message).copied()
    }

    pub fn consumers_of(&self, message: &MessageId) -> &[VertexId] {
        self.consumers.get(message).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every recorded execution of step `ordinal` of `instance`.
    pub fn steps_at(&self, instance: &InstanceId, ordinal: u64) -> &[VertexId] {
        self.steps.get(instance).and_then(|s| s.get(&ordinal)).map_or(&[], Vec::as_slice)
    }

    pub fn count_in(&self, progress: ProgressState) -> usize {
        self.vertices.values().filter(|v| v.progress == progress).count()
    }

    /// Direct causal predecessors: producers of consumed messages and the
    /// predecessor step.
    pub fn predecessors(&self, id: VertexId) -> Vec<VertexId> {
        let mut out: Vec<VertexId> =
            self.message_edges.iter().filter(|(_, c, _)| *c == id).map(|(p, _, _)| *p).collect();
        out.extend(self.successor_edges.iter().filter(|(_, to)| *to == id).map(|(from, _)| *from));
        out.sort();
        out.dedup();
        out
    }

    fn successors_index(&self) -> BTreeMap<VertexId, Vec<VertexId>> {
        let mut out: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        for (p, c, _) in &self.message_edges {
            out.entry(*p).or_default().push(*c);
        }
        for (a, b) in &self.successor_edges {
            out.entry(*a).or_default().push(*b);
        }
        out
    }

    pub fn advance_progress(&mut self, vertex: VertexId, to: ProgressState) -> Result<(), GraphError> {
        let v = self.vertices.get_mut(&vertex).ok_or(GraphError::UnknownVertex(vertex))?;
        if !v.progress.can_transition_to(to) {
            return Err(GraphError::IllegalTransition { vertex, from: v.progress, to });
        }
        v.progress = to;
        Ok(())
    }

    fn validate_shape(kind: &VertexKind, consumed: &[MessageId], produced: &[MessageId]) -> Result<(), GraphError> {
        match kind {
            VertexKind::Input if !consumed.is_empty() => {
                Err(GraphError::MalformedWorkItem("input vertices consume nothing".into()))
            }
            VertexKind::Task { .. } if consumed.len() != 1 || produced.len() > 1 => Err(
                GraphError::MalformedWorkItem("a task consumes one message and produces one result".into()),
            ),
            VertexKind::Step { .. } if consumed.is_empty() => {
                Err(GraphError::MalformedWorkItem("a step consumes at least one message".into()))
            }
            VertexKind::Step { ordinal: 0, .. } => {
                Err(GraphError::MalformedWorkItem("step ordinals start at 1".into()))
            }
            _ => Ok(()),
        }
    }

    fn live_consumer(&self, message: &MessageId) -> Option<VertexId> {
        self.consumers_of(message)
            .iter()
            .copied()
            .find(|c| self.vertices[c].progress != ProgressState::Aborted)
    }

    fn live_step(&self, instance: &InstanceId, ordinal: u64) -> Option<VertexId> {
        self.steps.get(instance)?.get(&ordinal)?.iter().copied().find(|v| {
            self.vertices[v].progress != ProgressState::Aborted
        })
    }

    /// Adds a work item (or input). Inputs are born Persisted; everything else
    /// starts InProgress. Fails without modifying the graph if the
    /// single-consumption property would be broken.
    pub fn record_work_item(
        &mut self,
        kind: VertexKind,
        consumed: &[MessageId],
        produced: &[MessageId],
    ) -> Result<VertexId, GraphError> {
        Self::validate_shape(&kind, consumed, produced)?;
        for m in consumed {
            if !self.producer.contains_key(m) {
                return Err(GraphError::UnknownMessage(*m));
            }
            if let Some(by) = self.live_consumer(m) {
                return Err(GraphError::MessageAlreadyConsumed { message: *m, by });
            }
        }
        let mut seen = BTreeSet::new();
        for m in produced {
            if self.producer.contains_key(m) || !seen.insert(*m) {
                return Err(GraphError::DuplicateMessage(*m));
            }
        }
        if let VertexKind::Step { instance, ordinal } = &kind {
            if *ordinal > 1 && self.live_step(instance, ordinal - 1).is_none() {
                return Err(GraphError::MalformedWorkItem(format!(
                    "step {ordinal} of {instance} has no live predecessor"
                )));
            }
        }
        Ok(self.record_unchecked(kind, consumed, produced))
    }

    /// Adds a vertex and every edge that can be resolved, without enforcing
    /// any property. Used by trace recorders so that a broken execution is
    /// still captured for the checkers.
    pub fn record_unchecked(&mut self, kind: VertexKind, consumed: &[MessageId], produced: &[MessageId]) -> VertexId {
        let id = VertexId(self.next_vertex);
        self.next_vertex += 1;
        let progress = if kind.is_work_item() { ProgressState::InProgress } else { ProgressState::Persisted };
        for m in consumed {
            if let Some(p) = self.producer.get(m) {
                self.message_edges.insert((*p, id, *m));
            }
            self.consumers.entry(*m).or_default().push(id);
        }
        for m in produced {
            self.producer.entry(*m).or_insert(id);
        }
        if let VertexKind::Step { instance, ordinal } = &kind {
            if *ordinal > 1 {
                if let Some(pred) = self.live_step(instance, ordinal - 1) {
                    self.successor_edges.insert((pred, id));
                }
            }
            self.steps.entry(instance.clone()).or_default().entry(*ordinal).or_default().push(id);
        }
        self.vertices.insert(
            id,
            ExecutionVertex { id, kind, progress, consumed: consumed.to_vec(), produced: produced.to_vec() },
        );
        id
    }

    /// Registers messages produced by a work item once it finishes.
    pub fn add_produced(&mut self, vertex: VertexId, produced: &[MessageId]) -> Result<(), GraphError> {
        if !self.vertices.contains_key(&vertex) {
            return Err(GraphError::UnknownVertex(vertex));
        }
        for m in produced {
            if self.producer.contains_key(m) {
                return Err(GraphError::DuplicateMessage(*m));
            }
        }
        let v = self.vertices.get_mut(&vertex).expect("checked above");
        if matches!(v.kind, VertexKind::Task { .. }) && v.produced.len() + produced.len() > 1 {
            return Err(GraphError::MalformedWorkItem("a task produces exactly one result".into()));
        }
        v.produced.extend_from_slice(produced);
        for m in produced {
            self.producer.insert(*m, vertex);
            // consumers recorded before the producer was known
            if let Some(cs) = self.consumers.get(m) {
                for c in cs {
                    self.message_edges.insert((vertex, *c, *m));
                }
            }
        }
        Ok(())
    }

    /// Every non-Persisted vertex forward-reachable from `vertex`, inclusive.
    /// Reaching a Persisted vertex means committed work depends on the
    /// aborted one, which is reported as an error.
    pub fn abort_closure(&self, vertex: VertexId) -> Result<BTreeSet<VertexId>, GraphError> {
        let start = self.vertices.get(&vertex).ok_or(GraphError::UnknownVertex(vertex))?;
        if start.progress == ProgressState::Persisted {
            return Err(GraphError::PersistedDependsOnAborted { aborted: vertex, persisted: vertex });
        }
        let succ = self.successors_index();
        let mut seen = BTreeSet::from([vertex]);
        let mut queue = VecDeque::from([vertex]);
        while let Some(v) = queue.pop_front() {
            for next in succ.get(&v).into_iter().flatten() {
                if self.vertices[next].progress == ProgressState::Persisted {
                    return Err(GraphError::PersistedDependsOnAborted { aborted: vertex, persisted: *next });
                }
                if seen.insert(*next) {
                    queue.push_back(*next);
                }
            }
        }
        Ok(seen)
    }

    /// Marks the abort closure of `vertex` Aborted. On error nothing changes.
    pub fn abort(&mut self, vertex: VertexId) -> Result<BTreeSet<VertexId>, GraphError> {
        let closure = self.abort_closure(vertex)?;
        for v in &closure {
            self.vertices.get_mut(v).expect("closure vertices exist").progress = ProgressState::Aborted;
        }
        Ok(closure)
    }

    /// Forces a vertex Aborted regardless of dependents; only for recorders
    /// that must keep going after a violation was already reported.
    pub fn force_abort(&mut self, vertex: VertexId) {
        if let Some(v) = self.vertices.get_mut(&vertex) {
            if v.progress != ProgressState::Persisted {
                v.progress = ProgressState::Aborted;
            }
        }
    }

    pub(super) fn insert_parsed(&mut self, v: ExecutionVertex) {
        self.next_vertex = self.next_vertex.max(v.id.0 + 1);
        if let VertexKind::Step { instance, ordinal } = &v.kind {
            self.steps.entry(instance.clone()).or_default().entry(*ordinal).or_default().push(v.id);
        }
        self.vertices.insert(v.id, v);
    }

    pub(super) fn insert_message_edge(&mut self, producer: VertexId, consumer: VertexId, m: MessageId) {
        self.message_edges.insert((producer, consumer, m));
    }

    pub(super) fn rebuild_indexes(&mut self) {
        self.producer.clear();
        self.consumers.clear();
        for v in self.vertices.values() {
            for m in &v.produced {
                self.producer.entry(*m).or_insert(v.id);
            }
            for m in &v.consumed {
                self.consumers.entry(*m).or_default().push(v.id);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceId;

    fn mid(n: u64) -> MessageId {
        MessageId { origin: SourceId::Partition(0), incarnation: 0, counter: n }
    }

    fn step(ordinal: u64) -> VertexKind {
        VertexKind::Step { instance: InstanceId::new("SimpleSequence", "a"), ordinal }
    }

    fn task(name: &str) -> VertexKind {
        VertexKind::Task { task_name: name.into() }
    }

    /// Input, three steps and two tasks of a two-activity sequence.
    pub(crate) fn simple_sequence() -> (ExecutionGraph, Vec<VertexId>) {
        let mut g = ExecutionGraph::new();
        let input = g.record_work_item(VertexKind::Input, &[], &[mid(0)]).unwrap();
        let s1 = g.record_work_item(step(1), &[mid(0)], &[mid(1)]).unwrap();
        let t1 = g.record_work_item(task("F1"), &[mid(1)], &[mid(2)]).unwrap();
        let s2 = g.record_work_item(step(2), &[mid(2)], &[mid(3)]).unwrap();
        let t2 = g.record_work_item(task("F2"), &[mid(3)], &[mid(4)]).unwrap();
        let s3 = g.record_work_item(step(3), &[mid(4)], &[]).unwrap();
        (g, vec![input, s1, t1, s2, t2, s3])
    }

    #[test]
    fn input_vertex_is_born_persisted() {
        let mut g = ExecutionGraph::new();
        let v = g.record_work_item(VertexKind::Input, &[], &[mid(0)]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.vertex(v).unwrap().progress, ProgressState::Persisted);
    }

    #[test]
    fn two_task_sequence_shape() {
        let (g, _) = simple_sequence();
        assert_eq!(g.len(), 6);
        assert_eq!(g.message_edges().len(), 5);
        assert_eq!(g.successor_edges().len(), 2);
    }

    #[test]
    fn double_consumption_is_rejected() {
        let mut g = ExecutionGraph::new();
        g.record_work_item(VertexKind::Input, &[], &[mid(0)]).unwrap();
        let first = g.record_work_item(step(1), &[mid(0)], &[]).unwrap();
        let err = g
            .record_work_item(VertexKind::Step { instance: InstanceId::new("X", "y"), ordinal: 1 }, &[mid(0)], &[])
            .unwrap_err();
        assert_eq!(err, GraphError::MessageAlreadyConsumed { message: mid(0), by: first });
        // once the first consumer is aborted, re-consumption is legal
        g.advance_progress(first, ProgressState::Aborted).unwrap();
        g.record_work_item(step(1), &[mid(0)], &[]).unwrap();
    }

    #[test]
    fn unknown_message_is_rejected() {
        let mut g = ExecutionGraph::new();
        assert_eq!(g.record_work_item(step(1), &[mid(7)], &[]), Err(GraphError::UnknownMessage(mid(7))));
    }

    #[test]
    fn progress_automaton() {
        let (mut g, v) = simple_sequence();
        g.advance_progress(v[1], ProgressState::Completed).unwrap();
        g.advance_progress(v[1], ProgressState::Persisted).unwrap();
        assert_eq!(
            g.advance_progress(v[1], ProgressState::Aborted),
            Err(GraphError::IllegalTransition {
                vertex: v[1],
                from: ProgressState::Persisted,
                to: ProgressState::Aborted
            })
        );
        assert_eq!(g.advance_progress(VertexId(99), ProgressState::Completed), Err(GraphError::UnknownVertex(VertexId(99))));
    }

    #[test]
    fn abort_step_two_takes_task_two_and_step_three() {
        let (mut g, v) = simple_sequence();
        for &x in &v[1..3] {
            g.advance_progress(x, ProgressState::Completed).unwrap();
            g.advance_progress(x, ProgressState::Persisted).unwrap();
        }
        g.advance_progress(v[3], ProgressState::Completed).unwrap();
        g.advance_progress(v[4], ProgressState::Completed).unwrap();
        let closure = g.abort_closure(v[3]).unwrap();
        assert_eq!(closure, BTreeSet::from([v[3], v[4], v[5]]));
    }

    #[test]
    fn abort_leaf_is_itself() {
        let (g, v) = simple_sequence();
        assert_eq!(g.abort_closure(v[5]).unwrap(), BTreeSet::from([v[5]]));
    }

    #[test]
    fn abort_with_persisted_successor_is_flagged() {
        let (mut g, v) = simple_sequence();
        // step 3 persisted while step 2 is only completed: the closure must refuse
        g.advance_progress(v[3], ProgressState::Completed).unwrap();
        g.advance_progress(v[5], ProgressState::Completed).unwrap();
        g.advance_progress(v[5], ProgressState::Persisted).unwrap();
        assert_eq!(
            g.abort_closure(v[3]),
            Err(GraphError::PersistedDependsOnAborted { aborted: v[3], persisted: v[5] })
        );
    }
}
