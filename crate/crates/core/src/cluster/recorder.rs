use std::collections::{BTreeMap, BTreeSet};

use crate::model::{ExecutionGraph, GraphError, MessageId, ProgressState, VertexId, VertexKind};
use crate::partition::{Observation, WorkRef};

/// Builds the fault-augmented execution graph from runtime observations.
/// Anything the graph refuses is still recorded and counted as a violation
/// so the checkers see it.
#[derive(Debug, Default)]
pub struct Recorder {
    pub graph: ExecutionGraph,
    vertex: BTreeMap<WorkRef, VertexId>,
    /// Vertices that are neither persisted nor aborted, per partition.
    live: BTreeMap<u32, BTreeSet<WorkRef>>,
    pub violations: Vec<String>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, message: MessageId) {
        if let Err(e) = self.graph.record_work_item(VertexKind::Input, &[], &[message]) {
            self.violations.push(format!("input {message}: {e}"));
            self.graph.record_unchecked(VertexKind::Input, &[], &[message]);
        }
    }

    pub fn observe(&mut self, o: Observation) {
        match o {
            Observation::Started { wref, kind, consumed } => {
                let doomed = self.depends_on_aborted(&kind, &consumed);
                let v = match self.graph.record_work_item(kind.clone(), &consumed, &[]) {
                    Ok(v) => v,
                    Err(e) => {
                        if !doomed {
                            self.violations.push(format!("start {wref:?}: {e}"));
                        }
                        self.graph.record_unchecked(kind, &consumed, &[])
                    }
                };
                // its owner has not heard of the abort yet and will roll it
                // back later
                if doomed {
                    self.graph.force_abort(v);
                }
                self.vertex.insert(wref, v);
                self.live.entry(wref.partition).or_default().insert(wref);
            }
            Observation::Finished { wref, produced } => {
                let Some(&v) = self.vertex.get(&wref) else { return };
                if let Err(e) = self.graph.add_produced(v, &produced) {
                    self.violations.push(format!("finish {wref:?}: {e}"));
                }
                self.advance(wref, ProgressState::Completed);
            }
            Observation::Persisted(refs) => {
                for w in refs {
                    self.advance(w, ProgressState::Persisted);
                    if let Some(l) = self.live.get_mut(&w.partition) {
                        l.remove(&w);
                    }
                }
            }
            Observation::RolledBack(refs) => {
                for w in refs {
                    self.abort(w);
                }
            }
            Observation::EntityState { .. } | Observation::Rewound { .. } => {}
        }
    }

    fn depends_on_aborted(&self, kind: &VertexKind, consumed: &[MessageId]) -> bool {
        let aborted = |v: VertexId| self.graph.vertex(v).is_some_and(|x| x.progress == ProgressState::Aborted);
        if consumed.iter().any(|m| self.graph.producer_of(m).is_some_and(aborted)) {
            return true;
        }
        match kind {
            VertexKind::Step { instance, ordinal } if *ordinal > 1 => {
                let prev = self.graph.steps_at(instance, ordinal - 1);
                !prev.is_empty() && prev.iter().all(|v| aborted(*v))
            }
            _ => false,
        }
    }

    fn advance(&mut self, wref: WorkRef, to: ProgressState) {
        let Some(&v) = self.vertex.get(&wref) else { return };
        let aborted = self.graph.vertex(v).is_some_and(|x| x.progress == ProgressState::Aborted);
        if aborted && to == ProgressState::Completed {
            return;
        }
        if let Err(e) = self.graph.advance_progress(v, to) {
            self.violations.push(format!("{wref:?}: {e}"));
        }
    }

    fn abort(&mut self, wref: WorkRef) {
        let Some(&v) = self.vertex.get(&wref) else { return };
        if let Some(l) = self.live.get_mut(&wref.partition) {
            l.remove(&wref);
        }
        if self.graph.vertex(v).is_some_and(|x| x.progress == ProgressState::Aborted) {
            return;
        }
        match self.graph.abort(v) {
            Ok(_) => {}
            Err(e @ GraphError::PersistedDependsOnAborted { .. }) => {
                self.violations.push(format!("abort {wref:?}: {e}"));
                self.graph.force_abort(v);
            }
            Err(e) => self.violations.push(format!("abort {wref:?}: {e}")),
        }
    }

    /// A crash loses every unpersisted work item of the partition, and with
    /// them everything that causally depends on them.
    pub fn crash(&mut self, partition: u32) {
        let refs: Vec<WorkRef> = self.live.remove(&partition).unwrap_or_default().into_iter().collect();
        for w in refs {
            self.abort(w);
        }
    }

    pub fn vertex_of(&self, wref: &WorkRef) -> Option<VertexId> {
        self.vertex.get(wref).copied()
    }
}
