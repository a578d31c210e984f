//! Persistence and propagation policies, speculation tags and the
//! bookkeeping that decides when speculative work may be committed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::LogPosition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeculationMode {
    /// Work only runs once everything it depends on is durable.
    #[default]
    Conservative,
    /// Messages that stay in the partition are processed before they are
    /// durable; remote messages wait in the outbox.
    Local,
    /// Remote messages are sent immediately, tagged, and confirmed later.
    Global,
}

impl fmt::Display for SpeculationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeculationMode::Conservative => "conservative",
            SpeculationMode::Local => "local",
            SpeculationMode::Global => "global",
        })
    }
}

impl FromStr for SpeculationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "conservative" => Ok(SpeculationMode::Conservative),
            "local" => Ok(SpeculationMode::Local),
            "global" => Ok(SpeculationMode::Global),
            other => Err(format!("unknown speculation mode `{other}`")),
        }
    }
}

/// Provenance of a speculative message. The incarnation distinguishes log
/// positions that were reused after a rewind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeculationTag {
    pub source_partition: u32,
    pub incarnation: u32,
    pub origin_logpos: LogPosition,
}

/// What a recovery notice says about a tag from the recovered partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagFate {
    Confirmed,
    Aborted,
    Unknown,
}

/// A recovery notice: `partition` restarted as `incarnation` with its log
/// ending at `recovered_logpos`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecoveryNotice {
    pub partition: u32,
    pub incarnation: u32,
    pub recovered_logpos: Option<LogPosition>,
}

impl RecoveryNotice {
    pub fn fate(&self, tag: &SpeculationTag) -> TagFate {
        if tag.source_partition != self.partition || tag.incarnation >= self.incarnation {
            return TagFate::Unknown;
        }
        match self.recovered_logpos {
            Some(r) if tag.origin_logpos <= r => TagFate::Confirmed,
            _ => TagFate::Aborted,
        }
    }
}

/// Where produced messages go right after a step, before its record is
/// durable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Routing {
    pub deliver_local_now: bool,
    pub send_remote_now: bool,
}

pub fn route_produced_messages(mode: SpeculationMode) -> Routing {
    match mode {
        SpeculationMode::Conservative => Routing { deliver_local_now: false, send_remote_now: false },
        SpeculationMode::Local => Routing { deliver_local_now: true, send_remote_now: false },
        SpeculationMode::Global => Routing { deliver_local_now: true, send_remote_now: true },
    }
}

/// Receiver-side record of consumed speculative messages, keyed by tag, with
/// the local log position of the record that admitted each one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpeculativeDependencySet {
    deps: BTreeMap<SpeculationTag, LogPosition>,
}

impl SpeculativeDependencySet {
    pub fn is_empty(&self) -> bool {
        self.deps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.deps.len()
    }

    pub fn register(&mut self, tag: SpeculationTag, admitted_at: LogPosition) {
        let e = self.deps.entry(tag).or_insert(admitted_at);
        *e = (*e).min(admitted_at);
    }

    pub fn confirm(&mut self, tag: &SpeculationTag) -> bool {
        self.deps.remove(tag).is_some()
    }

    /// Local records at or after this position may not become durable.
    pub fn barrier(&self) -> Option<LogPosition> {
        self.deps.values().min().copied()
    }

    pub fn contains(&self, tag: &SpeculationTag) -> bool {
        self.deps.contains_key(tag)
    }

    /// Applies a recovery notice: confirms what it covers and returns the
    /// earliest local position that consumed an aborted tag.
    pub fn on_recovery_notice(&mut self, notice: &RecoveryNotice) -> Option<LogPosition> {
        let mut first_aborted: Option<LogPosition> = None;
        self.deps.retain(|tag, at| match notice.fate(tag) {
            TagFate::Confirmed => false,
            TagFate::Aborted => {
                first_aborted = Some(first_aborted.map_or(*at, |f| f.min(*at)));
                true
            }
            TagFate::Unknown => true,
        });
        first_aborted
    }

    /// Forgets dependencies registered by records that a rewind discarded.
    pub fn discard_after(&mut self, keep_through: Option<LogPosition>) {
        self.deps.retain(|_, at| keep_through.is_some_and(|k| *at <= k));
    }
}

/// Sender-side list of speculatively sent tags awaiting durability.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnconfirmedSends {
    sent: BTreeSet<(LogPosition, u32, u32)>,
}

impl UnconfirmedSends {
    pub fn record(&mut self, tag: SpeculationTag, target: u32) {
        self.sent.insert((tag.origin_logpos, tag.incarnation, target));
    }

    pub fn is_empty(&self) -> bool {
        self.sent.is_empty()
    }

    /// Confirms for every send whose origin is now durable; each one is
    /// returned exactly once as (target partition, tag).
    pub fn on_persisted(&mut self, partition: u32, flushed: LogPosition) -> Vec<(u32, SpeculationTag)> {
        let rest = self.sent.split_off(&(flushed.next(), 0, 0));
        let done = std::mem::replace(&mut self.sent, rest);
        done.into_iter()
            .map(|(origin_logpos, incarnation, target)| {
                (target, SpeculationTag { source_partition: partition, incarnation, origin_logpos })
            })
            .collect()
    }

    /// Drops sends whose origin a rewind discarded.
    pub fn discard_after(&mut self, keep_through: Option<LogPosition>) {
        match keep_through {
            Some(k) => {
                self.sent.split_off(&(k.next(), 0, 0));
            }
            None => self.sent.clear(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(p: u32, inc: u32, pos: u64) -> SpeculationTag {
        SpeculationTag { source_partition: p, incarnation: inc, origin_logpos: LogPosition(pos) }
    }

    #[test]
    fn routing_per_mode() {
        assert_eq!(route_produced_messages(SpeculationMode::Conservative), Routing { deliver_local_now: false, send_remote_now: false });
        assert_eq!(route_produced_messages(SpeculationMode::Local), Routing { deliver_local_now: true, send_remote_now: false });
        assert_eq!(route_produced_messages(SpeculationMode::Global), Routing { deliver_local_now: true, send_remote_now: true });
    }

    #[test]
    fn confirms_on_persist() {
        let mut s = UnconfirmedSends::default();
        s.record(tag(0, 1, 7), 3);
        s.record(tag(0, 1, 9), 3);
        assert_eq!(s.on_persisted(0, LogPosition(8)), vec![(3, tag(0, 1, 7))]);
        assert_eq!(s.on_persisted(0, LogPosition(9)), vec![(3, tag(0, 1, 9))]);
        assert!(s.on_persisted(0, LogPosition(20)).is_empty());
    }

    #[test]
    fn notice_rewinds_to_first_dependent_position() {
        let mut d = SpeculativeDependencySet::default();
        d.register(tag(2, 1, 15), LogPosition(33));
        let n = RecoveryNotice { partition: 2, incarnation: 2, recovered_logpos: Some(LogPosition(12)) };
        assert_eq!(d.on_recovery_notice(&n), Some(LogPosition(33)));

        let mut d = SpeculativeDependencySet::default();
        d.register(tag(2, 1, 15), LogPosition(33));
        let n = RecoveryNotice { partition: 2, incarnation: 2, recovered_logpos: Some(LogPosition(20)) };
        assert_eq!(d.on_recovery_notice(&n), None);
        assert!(d.is_empty());
    }

    #[test]
    fn newer_incarnations_are_untouched() {
        let n = RecoveryNotice { partition: 2, incarnation: 2, recovered_logpos: None };
        assert_eq!(n.fate(&tag(2, 2, 0)), TagFate::Unknown);
        assert_eq!(n.fate(&tag(2, 1, 0)), TagFate::Aborted);
        assert_eq!(n.fate(&tag(1, 1, 0)), TagFate::Unknown);
    }

    #[test]
    fn barrier_is_earliest_admission() {
        let mut d = SpeculativeDependencySet::default();
        assert_eq!(d.barrier(), None);
        d.register(tag(1, 1, 4), LogPosition(10));
        d.register(tag(2, 1, 4), LogPosition(6));
        assert_eq!(d.barrier(), Some(LogPosition(6)));
        d.confirm(&tag(2, 1, 4));
        assert_eq!(d.barrier(), Some(LogPosition(10)));
        d.discard_after(Some(LogPosition(9)));
        assert!(d.is_empty());
    }
}
