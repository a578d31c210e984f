use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;

use super::{EntityDefinition, WorkflowDefinition};
use crate::model::Payload;

/// Activities may be nondeterministic; the runtime hands them a random
/// source so simulated runs stay reproducible.
pub type ActivityFn = dyn Fn(&Payload, &mut dyn RngCore) -> Payload + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InstanceKind {
    Orchestration,
    Entity,
}

/// Everything a host can execute, looked up by name.
#[derive(Clone)]
pub struct Registry {
    orchestrations: BTreeMap<String, WorkflowDefinition>,
    entities: BTreeMap<String, EntityDefinition>,
    activities: BTreeMap<String, Arc<ActivityFn>>,
    pub max_history: usize,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            orchestrations: BTreeMap::new(),
            entities: BTreeMap::new(),
            activities: BTreeMap::new(),
            max_history: 10_000,
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn orchestration(&mut self, def: WorkflowDefinition) -> &mut Self {
        self.orchestrations.insert(def.name.clone(), def);
        self
    }

    pub fn entity(&mut self, def: EntityDefinition) -> &mut Self {
        self.entities.insert(def.name.clone(), def);
        self
    }

    pub fn activity(
        &mut self,
        name: &str,
        f: impl Fn(&Payload, &mut dyn RngCore) -> Payload + Send + Sync + 'static,
    ) -> &mut Self {
        self.activities.insert(name.into(), Arc::new(f));
        self
    }

    pub fn get_orchestration(&self, name: &str) -> Option<&WorkflowDefinition> {
        self.orchestrations.get(name)
    }

    pub fn get_entity(&self, name: &str) -> Option<&EntityDefinition> {
        self.entities.get(name)
    }

    pub fn get_activity(&self, name: &str) -> Option<&Arc<ActivityFn>> {
        self.activities.get(name)
    }

    pub fn kind_of(&self, name: &str) -> Option<InstanceKind> {
        if self.orchestrations.contains_key(name) {
            Some(InstanceKind::Orchestration)
        } else if self.entities.contains_key(name) {
            Some(InstanceKind::Entity)
        } else {
            None
        }
    }
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("orchestrations", &self.orchestrations.keys().collect::<Vec<_>>())
            .field("entities", &self.entities.keys().collect::<Vec<_>>())
            .field("activities", &self.activities.keys().collect::<Vec<_>>())
            .finish()
    }
}
