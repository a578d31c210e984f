//! Durable per-partition input queues.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::model::{Message, SourceId};
use crate::speculation::{RecoveryNotice, SpeculationTag};
use crate::storage::{frame, BlobStore, MemBlobStore, StorageError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum EnvelopePayload {
    Message(Message),
    /// The sender's record at `tag` is durable.
    Confirm { tag: SpeculationTag },
    Recovery(RecoveryNotice),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub target_partition: u32,
    pub source: SourceId,
    /// Per (source, target) sequence number used for deduplication; zero for
    /// control envelopes.
    pub seq: u64,
    pub payload: EnvelopePayload,
    pub speculation_tag: Option<SpeculationTag>,
    /// Highest incarnation of the target the sender had learned from its
    /// recovery notices when this was sent.
    pub known_incarnation: u32,
}

impl Envelope {
    pub fn control(target_partition: u32, source: SourceId, payload: EnvelopePayload) -> Self {
        Self { target_partition, source, seq: 0, payload, speculation_tag: None, known_incarnation: 0 }
    }
}

/// Append-only queues, one blob per partition, with a decoded copy kept in
/// memory for reads.
#[derive(Clone)]
pub struct Transport {
    blobs: Arc<dyn BlobStore>,
    queues: Arc<Mutex<HashMap<u32, Vec<Envelope>>>>,
}

fn queue_blob(p: u32) -> String {
    format!("q{p}/queue")
}

impl Transport {
    pub fn new(blobs: Arc<dyn BlobStore>) -> Self {
        Self { blobs, queues: Arc::new(Mutex::new(HashMap::new())) }
    }

    pub fn in_memory() -> Self {
        Self::new(Arc::new(MemBlobStore::new()))
    }

    fn with_queue<T>(&self, p: u32, f: impl FnOnce(&mut Vec<Envelope>) -> Result<T, StorageError>) -> Result<T, StorageError> {
        let mut all = self.queues.lock().unwrap();
        if let Entry::Vacant(slot) = all.entry(p) {
            let name = queue_blob(p);
            let mut q = Vec::new();
            if let Some(data) = self.blobs.read(&name)? {
                let decoded = frame::decode(&name, &data)?;
                for (_, payload) in decoded.frames {
                    q.push(bincode::deserialize(payload)?);
                }
                if decoded.valid_len < data.len() as u64 {
                    self.blobs.truncate(&name, decoded.valid_len)?;
                }
            }
            slot.insert(q);
        }
        f(all.get_mut(&p).unwrap())
    }

    /// Durably appends to the target's queue and returns its queue position.
    pub fn qsend(&self, env: Envelope) -> Result<u64, StorageError> {
        let mut bytes = Vec::new();
        frame::encode(&bincode::serialize(&env)?, &mut bytes);
        self.with_queue(env.target_partition, |q| {
            self.blobs.append(&queue_blob(env.target_partition), &bytes)?;
            q.push(env);
            Ok(q.len() as u64 - 1)
        })
    }

    /// Up to `max` entries starting at queue position `from`.
    pub fn qreceive(&self, p: u32, from: u64, max: usize) -> Result<Vec<(u64, Envelope)>, StorageError> {
        self.with_queue(p, |q| {
            Ok(q.iter().enumerate().skip(from as usize).take(max).map(|(i, e)| (i as u64, e.clone())).collect())
        })
    }

    pub fn qlen(&self, p: u32) -> u64 {
        self.with_queue(p, |q| Ok(q.len() as u64)).unwrap_or(0)
    }
}
