//! Durable storage for partitions: the commit log, checkpoints, leases,
//! incarnation counters and spilled instance states, all kept in a
//! [`BlobStore`].

mod blob;
mod cache;
pub mod frame;

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstanceId, LogPosition};
use crate::partition::{
    InstanceData, InstanceSlot, MessagesReceived, MessagesSent, PartitionError, PartitionEvent, PartitionState,
    StepCompleted, TaskCompleted,
};

pub use blob::{BlobStore, FsBlobStore, MemBlobStore};
pub use cache::InstanceCache;

pub const LEASE_DURATION_US: u64 = 10_000_000;
pub const LEASE_RENEW_US: u64 = 3_000_000;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt frame in {blob} at byte {offset}")]
    CorruptLog { blob: String, offset: u64 },
    #[error("codec: {0}")]
    Codec(String),
    #[error("partition {partition}: epoch {got} is fenced by {current}")]
    Fenced { partition: u32, current: u64, got: u64 },
    #[error("partition {partition}: lease held by node {owner} until {expires_us}us")]
    LeaseHeld { partition: u32, owner: u32, expires_us: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("append at {got} but log continues at {expected}")]
    NonContiguousAppend { expected: LogPosition, got: LogPosition },
    #[error("no valid checkpoint {0}")]
    CorruptCheckpoint(String),
    #[error("spilled state for {instance} at {version} is missing")]
    SpillMissing { instance: InstanceId, version: LogPosition },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

impl From<bincode::Error> for StorageError {
    fn from(e: bincode::Error) -> Self {
        StorageError::Codec(e.to_string())
    }
}

pub fn encode_event(event: &PartitionEvent) -> Result<Vec<u8>, StorageError> {
    let mut out = vec![event.tag()];
    match event {
        PartitionEvent::MessagesReceived(e) => bincode::serialize_into(&mut out, e)?,
        PartitionEvent::MessagesSent(e) => bincode::serialize_into(&mut out, e)?,
        PartitionEvent::TaskCompleted(e) => bincode::serialize_into(&mut out, e)?,
        PartitionEvent::StepCompleted(e) => bincode::serialize_into(&mut out, e)?,
    }
    Ok(out)
}

pub fn decode_event(bytes: &[u8]) -> Result<PartitionEvent, StorageError> {
    let (tag, body) = bytes.split_first().ok_or_else(|| StorageError::Codec("empty record".into()))?;
    Ok(match tag {
        0 => PartitionEvent::MessagesReceived(bincode::deserialize::<MessagesReceived>(body)?),
        1 => PartitionEvent::MessagesSent(bincode::deserialize::<MessagesSent>(body)?),
        2 => PartitionEvent::TaskCompleted(bincode::deserialize::<TaskCompleted>(body)?),
        3 => PartitionEvent::StepCompleted(bincode::deserialize::<StepCompleted>(body)?),
        t => return Err(StorageError::Codec(format!("unknown record tag {t}"))),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub owner: u32,
    pub epoch: u64,
    pub expires_us: u64,
}

#[derive(Debug, Default)]
struct LogIndex {
    /// Byte offset of each record; index = log position.
    offsets: Vec<u64>,
    end: u64,
    flushes: u64,
    lease: Option<Lease>,
}

/// Shared storage service. Cheap to clone; every node and partition in a
/// cluster talks to the same instance.
#[derive(Clone)]
pub struct Storage {
    blobs: Arc<dyn BlobStore>,
    index: Arc<Mutex<HashMap<u32, LogIndex>>>,
}

fn log_blob(p: u32) -> String {
    format!("p{p}/log")
}

fn lease_blob(p: u32) -> String {
    format!("p{p}/lease")
}

fn incarnation_blob(p: u32) -> String {
    format!("p{p}/incarnation")
}

fn checkpoint_prefix(p: u32) -> String {
    format!("p{p}/chk-")
}

fn hex(s: &str) -> String {
    s.bytes().map(|b| format!("{b:02x}")).collect()
}

fn spill_blob(p: u32, id: &InstanceId, version: LogPosition) -> String {
    format!("p{p}/spill-{}-{}-{:020}", hex(&id.name), hex(&id.key), version.0)
}

impl Storage {
    pub fn new(blobs: Arc<dyn BlobStore>) -> Self {
        Self { blobs, index: Arc::new(Mutex::new(HashMap::new())) }
    }

    pub fn in_memory() -> Self {
        Self::new(Arc::new(MemBlobStore::new()))
    }

    pub fn blobs(&self) -> &Arc<dyn BlobStore> {
        &self.blobs
    }

    fn with_index<T>(
        &self,
        p: u32,
        f: impl FnOnce(&mut LogIndex) -> Result<T, StorageError>,
    ) -> Result<T, StorageError> {
        let mut all = self.index.lock().unwrap();
        let idx = match all.entry(p) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(self.load_index(p)?),
        };
        f(idx)
    }

    fn load_index(&self, p: u32) -> Result<LogIndex, StorageError> {
        let name = log_blob(p);
        let mut idx = LogIndex::default();
        if let Some(data) = self.blobs.read(&name)? {
            let decoded = frame::decode(&name, &data)?;
            for (off, payload) in &decoded.frames {
                if payload.first() != Some(&frame::EPOCH_MARKER) {
                    idx.offsets.push(*off);
                }
            }
            idx.end = decoded.valid_len;
            if decoded.valid_len < data.len() as u64 {
                self.blobs.truncate(&name, decoded.valid_len)?;
            }
        }
        if let Some(b) = self.blobs.read(&lease_blob(p))? {
            idx.lease = Some(bincode::deserialize(&b)?);
        }
        Ok(idx)
    }

    fn check_epoch(p: u32, idx: &LogIndex, epoch: u64) -> Result<(), StorageError> {
        let current = idx.lease.map_or(0, |l| l.epoch);
        if current != epoch {
            return Err(StorageError::Fenced { partition: p, current, got: epoch });
        }
        Ok(())
    }

    /// Appends a batch with a single durable write. `first` must be the
    /// position right after the current tail.
    pub fn log_append(
        &self,
        p: u32,
        epoch: u64,
        first: LogPosition,
        events: &[PartitionEvent],
    ) -> Result<(), StorageError> {
        if events.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        let mut bytes = Vec::new();
        let mut rel = Vec::with_capacity(events.len());
        for e in events {
            rel.push(bytes.len() as u64);
            frame::encode(&encode_event(e)?, &mut bytes);
        }
        self.with_index(p, |idx| {
            Self::check_epoch(p, idx, epoch)?;
            let expected = LogPosition(idx.offsets.len() as u64);
            if first != expected {
                return Err(StorageError::NonContiguousAppend { expected, got: first });
            }
            self.blobs.append(&log_blob(p), &bytes)?;
            idx.offsets.extend(rel.iter().map(|r| idx.end + r));
            idx.end += bytes.len() as u64;
            idx.flushes += 1;
            Ok(())
        })
    }

    pub fn log_tail(&self, p: u32) -> Result<Option<LogPosition>, StorageError> {
        self.with_index(p, |idx| Ok(idx.offsets.len().checked_sub(1).map(|n| LogPosition(n as u64))))
    }

    /// Number of durable appends performed for `p` since this handle was
    /// created.
    pub fn flush_count(&self, p: u32) -> u64 {
        self.with_index(p, |idx| Ok(idx.flushes)).unwrap_or(0)
    }

    /// Records with positions in `from..`, in order.
    pub fn log_read(&self, p: u32, from: LogPosition) -> Result<Vec<(LogPosition, PartitionEvent)>, StorageError> {
        let start = self.with_index(p, |idx| Ok(idx.offsets.get(from.0 as usize).copied()))?;
        let Some(start) = start else { return Ok(Vec::new()) };
        let name = log_blob(p);
        let data = self.blobs.read(&name)?.unwrap_or_default();
        let decoded = frame::decode(&name, &data[start as usize..])?;
        let mut out = Vec::new();
        let mut pos = from;
        for (_, payload) in decoded.frames {
            if payload.first() == Some(&frame::EPOCH_MARKER) {
                continue;
            }
            out.push((pos, decode_event(payload)?));
            pos = pos.next();
        }
        Ok(out)
    }

    /// Drops records after `keep` (all of them for `None`) along with
    /// checkpoints that cover them, then writes an epoch marker.
    pub fn log_truncate_after(&self, p: u32, epoch: u64, keep: Option<LogPosition>) -> Result<(), StorageError> {
        let keep_len = keep.map_or(0, |k| k.0 as usize + 1);
        let removed = self.with_index(p, |idx| {
            Self::check_epoch(p, idx, epoch)?;
            if idx.offsets.len() <= keep_len {
                return Ok(false);
            }
            let cut = idx.offsets[keep_len];
            self.blobs.truncate(&log_blob(p), cut)?;
            let marker = frame::epoch_marker(epoch);
            self.blobs.append(&log_blob(p), &marker)?;
            idx.offsets.truncate(keep_len);
            idx.end = cut + marker.len() as u64;
            Ok(true)
        })?;
        if removed {
            for name in self.blobs.list(&checkpoint_prefix(p))? {
                if checkpoint_pos(&name).is_some_and(|c| keep.is_none_or(|k| c > k)) {
                    self.blobs.delete(&name)?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint_write(&self, p: u32, epoch: u64, state: &PartitionState) -> Result<(), StorageError> {
        self.with_index(p, |idx| Self::check_epoch(p, idx, epoch))?;
        let Some(at) = state.applied_through else { return Ok(()) };
        let body = bincode::serialize(state)?;
        let mut data = at.0.to_le_bytes().to_vec();
        data.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        data.extend_from_slice(&body);
        self.blobs.write(&format!("{}{:020}", checkpoint_prefix(p), at.0), &data)
    }

    /// Newest intact checkpoint at or before `at_most`.
    pub fn checkpoint_read_latest(
        &self,
        p: u32,
        at_most: Option<LogPosition>,
    ) -> Result<Option<PartitionState>, StorageError> {
        let mut names = self.blobs.list(&checkpoint_prefix(p))?;
        names.sort();
        for name in names.iter().rev() {
            let Some(pos) = checkpoint_pos(name) else { continue };
            if at_most.is_some_and(|m| pos > m) || at_most.is_none() {
                continue;
            }
            let Some(data) = self.blobs.read(name)? else { continue };
            if data.len() < 12 {
                continue;
            }
            let body = &data[12..];
            let crc = u32::from_le_bytes(data[8..12].try_into().unwrap());
            if u64::from_le_bytes(data[..8].try_into().unwrap()) != pos.0 || crc32fast::hash(body) != crc {
                continue;
            }
            match bincode::deserialize::<PartitionState>(body) {
                Ok(s) if s.applied_through == Some(pos) => return Ok(Some(s)),
                _ => continue,
            }
        }
        Ok(None)
    }

    /// Rebuilds the partition from its newest checkpoint and the log tail.
    pub fn recover(&self, p: u32) -> Result<(PartitionState, Option<LogPosition>), StorageError> {
        let tail = self.log_tail(p)?;
        let mut state = self.checkpoint_read_latest(p, tail)?.unwrap_or_else(|| PartitionState::new(p));
        let from = state.applied_through.map_or(LogPosition(0), LogPosition::next);
        for (pos, event) in self.log_read(p, from)? {
            if let PartitionEvent::StepCompleted(step) = &event {
                self.materialize(p, &mut state, &step.instance)?;
            }
            state.apply_event(pos, &event)?;
        }
        Ok((state, tail))
    }

    pub fn incarnation(&self, p: u32) -> Result<u32, StorageError> {
        Ok(match self.blobs.read(&incarnation_blob(p))? {
            Some(b) if b.len() == 4 => u32::from_le_bytes(b[..4].try_into().unwrap()),
            _ => 0,
        })
    }

    pub fn bump_incarnation(&self, p: u32) -> Result<u32, StorageError> {
        let next = self.incarnation(p)? + 1;
        self.blobs.write(&incarnation_blob(p), &next.to_le_bytes())?;
        Ok(next)
    }

    pub fn lease(&self, p: u32) -> Result<Option<Lease>, StorageError> {
        self.with_index(p, |idx| Ok(idx.lease))
    }

    fn store_lease(&self, p: u32, idx: &mut LogIndex, lease: Lease) -> Result<(), StorageError> {
        self.blobs.write(&lease_blob(p), &bincode::serialize(&lease)?)?;
        idx.lease = Some(lease);
        Ok(())
    }

    /// Takes the lease for `node`, returning the new epoch. Fails while
    /// another node holds an unexpired lease.
    pub fn lease_acquire(&self, p: u32, node: u32, now_us: u64) -> Result<u64, StorageError> {
        self.with_index(p, |idx| {
            if let Some(l) = idx.lease {
                if l.owner != node && l.expires_us > now_us {
                    return Err(StorageError::LeaseHeld { partition: p, owner: l.owner, expires_us: l.expires_us });
                }
            }
            let epoch = idx.lease.map_or(0, |l| l.epoch) + 1;
            self.store_lease(p, idx, Lease { owner: node, epoch, expires_us: now_us + LEASE_DURATION_US })?;
            Ok(epoch)
        })
    }

    pub fn lease_renew(&self, p: u32, node: u32, epoch: u64, now_us: u64) -> Result<(), StorageError> {
        self.with_index(p, |idx| {
            Self::check_epoch(p, idx, epoch)?;
            self.store_lease(p, idx, Lease { owner: node, epoch, expires_us: now_us + LEASE_DURATION_US })
        })
    }

    pub fn lease_release(&self, p: u32, node: u32, epoch: u64) -> Result<(), StorageError> {
        self.with_index(p, |idx| {
            Self::check_epoch(p, idx, epoch)?;
            self.store_lease(p, idx, Lease { owner: node, epoch, expires_us: 0 })
        })
    }

    pub fn spill_write(
        &self,
        p: u32,
        id: &InstanceId,
        version: LogPosition,
        data: &InstanceData,
    ) -> Result<(), StorageError> {
        self.blobs.write(&spill_blob(p, id, version), &bincode::serialize(data)?)
    }

    pub fn spill_read(&self, p: u32, id: &InstanceId, version: LogPosition) -> Result<InstanceData, StorageError> {
        match self.blobs.read(&spill_blob(p, id, version))? {
            Some(b) => Ok(bincode::deserialize(&b)?),
            None => Err(StorageError::SpillMissing { instance: id.clone(), version }),
        }
    }

    /// Loads an evicted instance back into the state.
    pub fn materialize(&self, p: u32, state: &mut PartitionState, id: &InstanceId) -> Result<(), StorageError> {
        if let Some(rec) = state.instances.get_mut(id) {
            if rec.slot == InstanceSlot::Evicted {
                rec.slot = InstanceSlot::Cached(self.spill_read(p, id, rec.version)?);
            }
        }
        Ok(())
    }

    pub fn materialize_all(&self, p: u32, state: &mut PartitionState) -> Result<(), StorageError> {
        let ids: Vec<_> = state.instances.keys().cloned().collect();
        for id in ids {
            self.materialize(p, state, &id)?;
        }
        Ok(())
    }
}

fn checkpoint_pos(name: &str) -> Option<LogPosition> {
    name.rsplit_once("chk-")?.1.parse().ok().map(LogPosition)
}
