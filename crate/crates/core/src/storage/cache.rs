use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Storage, StorageError};
use crate::model::InstanceId;
use crate::partition::{InstanceSlot, PartitionState};

/// Bounds how many instance states a partition keeps in memory. Cold
/// instances are spilled to storage at their current version and reloaded on
/// demand.
#[derive(Debug, Default)]
pub struct InstanceCache {
    budget: Option<usize>,
    tick: u64,
    last_used: HashMap<InstanceId, u64>,
    pub evictions: u64,
    pub loads: u64,
}

impl InstanceCache {
    pub fn new(budget: Option<usize>) -> Self {
        Self { budget, ..Self::default() }
    }

    /// Makes `id` resident and marks it most recently used.
    pub fn touch(&mut self, storage: &Storage, state: &mut PartitionState, id: &InstanceId) -> Result<(), StorageError> {
        self.tick += 1;
        self.last_used.insert(id.clone(), self.tick);
        if matches!(state.instances.get(id), Some(r) if r.slot == InstanceSlot::Evicted) {
            storage.materialize(state.partition_id, state, id)?;
            self.loads += 1;
        }
        Ok(())
    }

    /// Spills least recently used instances until the budget holds. Instances
    /// in `pinned` stay resident.
    pub fn enforce(
        &mut self,
        storage: &Storage,
        state: &mut PartitionState,
        pinned: &BTreeSet<InstanceId>,
    ) -> Result<(), StorageError> {
        let Some(budget) = self.budget else { return Ok(()) };
        let resident: BTreeMap<u64, InstanceId> = state
            .instances
            .iter()
            .filter(|(id, r)| r.slot != InstanceSlot::Evicted && !pinned.contains(*id))
            .map(|(id, _)| (self.last_used.get(id).copied().unwrap_or(0), id.clone()))
            .collect();
        let total = state.instances.values().filter(|r| r.slot != InstanceSlot::Evicted).count();
        let excess = total.saturating_sub(budget);
        for id in resident.into_values().take(excess) {
            let rec = state.instances.get_mut(&id).expect("listed above");
            if let InstanceSlot::Cached(data) = &rec.slot {
                storage.spill_write(state.partition_id, &id, rec.version, data)?;
                rec.slot = InstanceSlot::Evicted;
                self.evictions += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogPosition;
    use crate::orchestration::{EntityRuntimeState, InstanceKind};
    use crate::partition::{InstanceData, InstanceRecord};

    #[test]
    fn lru_spill_and_reload() {
        let storage = Storage::in_memory();
        let mut state = PartitionState::new(0);
        let ids: Vec<_> = (0..3).map(|i| InstanceId::new("Counter", i.to_string())).collect();
        for (i, id) in ids.iter().enumerate() {
            state.instances.insert(
                id.clone(),
                InstanceRecord {
                    kind: InstanceKind::Entity,
                    step_count: 1,
                    version: LogPosition(i as u64),
                    slot: InstanceSlot::Cached(InstanceData::Entity(EntityRuntimeState::new(i.to_string()))),
                },
            );
        }
        let reference = state.clone();
        let mut cache = InstanceCache::new(Some(1));
        cache.touch(&storage, &mut state, &ids[2]).unwrap();
        cache.touch(&storage, &mut state, &ids[0]).unwrap();
        cache.enforce(&storage, &mut state, &BTreeSet::new()).unwrap();
        assert_ne!(state.instances[&ids[0]].slot, InstanceSlot::Evicted);
        assert_eq!(state.instances[&ids[1]].slot, InstanceSlot::Evicted);
        assert_eq!(state.instances[&ids[2]].slot, InstanceSlot::Evicted);
        assert_eq!(cache.evictions, 2);

        cache.touch(&storage, &mut state, &ids[1]).unwrap();
        assert_eq!(cache.loads, 1);
        storage.materialize_all(0, &mut state).unwrap();
        assert_eq!(state, reference);
    }
}
