use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use super::graph::{ExecutionGraph, VertexId, VertexKind};
use super::{InstanceId, MessageId, ProgressState};

/// Which induced subgraph to check: P, P∪C, or P∪C∪I.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConsistencyLevel {
    Persisted,
    Completed,
    InProgress,
}

impl ConsistencyLevel {
    pub const ALL: [ConsistencyLevel; 3] =
        [ConsistencyLevel::Persisted, ConsistencyLevel::Completed, ConsistencyLevel::InProgress];

    fn admits(self, p: ProgressState) -> bool {
        match p {
            ProgressState::Persisted => true,
            ProgressState::Completed => self >= ConsistencyLevel::Completed,
            ProgressState::InProgress => self == ConsistencyLevel::InProgress,
            ProgressState::Aborted => false,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ConsistencyLevel::Persisted => "P",
            ConsistencyLevel::Completed => "P+C",
            ConsistencyLevel::InProgress => "P+C+I",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Cycle,
    MalformedEdge,
    /// A member consumes a message whose producer is outside the subgraph.
    DependsOutside,
    DoubleConsumption,
    OrdinalGap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencyViolation {
    pub level: ConsistencyLevel,
    pub kind: ViolationKind,
    pub vertex: Option<VertexId>,
    pub detail: String,
}

impl fmt::Display for ConsistencyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.vertex {
            Some(v) => write!(f, "[{}] {:?} at {}: {}", self.level.label(), self.kind, v, self.detail),
            None => write!(f, "[{}] {:?}: {}", self.level.label(), self.kind, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConsistencyReport {
    pub violations: Vec<ConsistencyViolation>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// One broken bullet of the commit guarantee (numbered 1..=4).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CccViolation {
    pub bullet: u8,
    pub vertex: Option<VertexId>,
    pub detail: String,
}

impl fmt::Display for CccViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.vertex {
            Some(v) => write!(f, "bullet {} at {}: {}", self.bullet, v, self.detail),
            None => write!(f, "bullet {}: {}", self.bullet, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CccReport {
    pub violations: Vec<CccViolation>,
}

impl CccReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn bullet(&self, n: u8) -> impl Iterator<Item = &CccViolation> {
        self.violations.iter().filter(move |v| v.bullet == n)
    }
}

impl ExecutionGraph {
    /// Checks each requested induced subgraph for acyclicity, edge
    /// well-formedness, single consumption and successor-ordinal contiguity.
    /// Aborted vertices belong to none of the subgraphs.
    pub fn check_consistency(&self, levels: &[ConsistencyLevel]) -> ConsistencyReport {
        let mut report = ConsistencyReport::default();
        for &level in levels {
            self.check_level(level, &mut report.violations);
        }
        report
    }

    fn check_level(&self, level: ConsistencyLevel, out: &mut Vec<ConsistencyViolation>) {
        let member = |v: &VertexId| self.vertices.get(v).is_some_and(|x| level.admits(x.progress));
        let mut push = |kind, vertex, detail: String| {
            out.push(ConsistencyViolation { level, kind, vertex, detail });
        };

        for (p, c, m) in &self.message_edges {
            if !(member(p) && member(c)) {
                continue;
            }
            let (pv, cv) = (&self.vertices[p], &self.vertices[c]);
            if !pv.produced.contains(m) || !cv.consumed.contains(m) {
                push(ViolationKind::MalformedEdge, Some(*c), format!("edge {p}->{c} carries {m} not in produced/consumed lists"));
            }
        }

        let mut consumed_by: BTreeMap<MessageId, Vec<VertexId>> = BTreeMap::new();
        let mut ordinals: BTreeMap<&InstanceId, Vec<(u64, VertexId)>> = BTreeMap::new();
        for v in self.vertices.values().filter(|v| level.admits(v.progress)) {
            for m in &v.consumed {
                consumed_by.entry(*m).or_default().push(v.id);
                match self.producer.get(m) {
                    Some(p) if member(p) => {}
                    Some(p) => push(
                        ViolationKind::DependsOutside,
                        Some(v.id),
                        format!("consumes {m} produced by {p} ({:?})", self.vertices[p].progress),
                    ),
                    None => push(ViolationKind::DependsOutside, Some(v.id), format!("consumes {m} with no producer")),
                }
            }
            if let VertexKind::Step { instance, ordinal } = &v.kind {
                ordinals.entry(instance).or_default().push((*ordinal, v.id));
            }
        }
        for (m, vs) in &consumed_by {
            if vs.len() > 1 {
                push(ViolationKind::DoubleConsumption, Some(vs[1]), format!("{m} consumed by {vs:?}"));
            }
        }

        for (instance, mut steps) in ordinals {
            steps.sort();
            for (i, (ordinal, v)) in steps.iter().enumerate() {
                if *ordinal != i as u64 + 1 {
                    push(
                        ViolationKind::OrdinalGap,
                        Some(*v),
                        format!("{instance}: expected step {} found {ordinal}", i + 1),
                    );
                    break;
                }
                if *ordinal > 1 {
                    let (_, prev) = steps[i - 1];
                    if !self.successor_edges.contains(&(prev, *v)) {
                        push(ViolationKind::OrdinalGap, Some(*v), format!("{instance}: missing successor edge {prev}->{v}"));
                    }
                }
            }
        }
        for (a, b) in &self.successor_edges {
            if !(member(a) && member(b)) {
                continue;
            }
            let ok = match (&self.vertices[a].kind, &self.vertices[b].kind) {
                (VertexKind::Step { instance: ia, ordinal: oa }, VertexKind::Step { instance: ib, ordinal: ob }) => {
                    ia == ib && oa + 1 == *ob
                }
                _ => false,
            };
            if !ok {
                push(ViolationKind::MalformedEdge, Some(*b), format!("successor edge {a}->{b} does not link consecutive steps"));
            }
        }

        // Kahn over the induced subgraph
        let mut indegree: BTreeMap<VertexId, usize> =
            self.vertices.keys().filter(|v| member(v)).map(|v| (*v, 0)).collect();
        let mut next: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        let edges = self
            .message_edges
            .iter()
            .map(|(p, c, _)| (*p, *c))
            .chain(self.successor_edges.iter().copied())
            .filter(|(a, b)| member(a) && member(b));
        for (a, b) in edges {
            next.entry(a).or_default().push(b);
            *indegree.get_mut(&b).expect("member") += 1;
        }
        let mut queue: VecDeque<VertexId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut visited = 0usize;
        while let Some(v) = queue.pop_front() {
            visited += 1;
            for n in next.get(&v).into_iter().flatten() {
                let d = indegree.get_mut(n).expect("member");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(*n);
                }
            }
        }
        if visited != indegree.len() {
            push(ViolationKind::Cycle, None, format!("{} vertices lie on cycles", indegree.len() - visited));
        }
    }

    /// Checks the four commit-guarantee bullets. Bullet 4 only applies when
    /// the graph is marked complete.
    pub fn check_ccc_properties(&self) -> CccReport {
        let mut report = CccReport::default();
        let mut preds: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        for (p, c, _) in &self.message_edges {
            preds.entry(*c).or_default().push(*p);
        }
        for (a, b) in &self.successor_edges {
            preds.entry(*b).or_default().push(*a);
        }
        for v in self.vertices.values() {
            for p in preds.get(&v.id).into_iter().flatten() {
                let pp = self.vertices[p].progress;
                if v.progress == ProgressState::Persisted && pp != ProgressState::Persisted {
                    report.violations.push(CccViolation {
                        bullet: 1,
                        vertex: Some(v.id),
                        detail: format!("persisted but depends on {p} ({pp:?})"),
                    });
                }
                if pp == ProgressState::Aborted && v.progress != ProgressState::Aborted {
                    report.violations.push(CccViolation {
                        bullet: 2,
                        vertex: Some(v.id),
                        detail: format!("{:?} but depends on aborted {p}", v.progress),
                    });
                }
            }
            // a consumed message without any producer cannot be justified
            if v.progress == ProgressState::Persisted {
                for m in &v.consumed {
                    if !self.producer.contains_key(m) {
                        report.violations.push(CccViolation {
                            bullet: 1,
                            vertex: Some(v.id),
                            detail: format!("consumes {m} that was never produced"),
                        });
                    }
                }
            }
        }

        let mut live_consumers: BTreeMap<MessageId, BTreeSet<VertexId>> = BTreeMap::new();
        for v in self.vertices.values().filter(|v| v.progress != ProgressState::Aborted) {
            for m in &v.consumed {
                live_consumers.entry(*m).or_default().insert(v.id);
            }
        }
        for (m, cs) in &live_consumers {
            if cs.len() > 1 {
                report.violations.push(CccViolation {
                    bullet: 3,
                    vertex: cs.iter().nth(1).copied(),
                    detail: format!("{m} consumed by {} non-aborted work items", cs.len()),
                });
            }
        }

        if self.complete {
            for v in self.vertices.values().filter(|v| v.progress != ProgressState::Aborted) {
                for m in &v.produced {
                    let n = live_consumers.get(m).map_or(0, BTreeSet::len);
                    if n != 1 {
                        report.violations.push(CccViolation {
                            bullet: 4,
                            vertex: Some(v.id),
                            detail: format!("{m} consumed by {n} non-aborted work items in a complete execution"),
                        });
                    }
                }
            }
        }
        report
    }
}
