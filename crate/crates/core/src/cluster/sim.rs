//! Discrete-event simulation of a cluster in virtual time. Everything is
//! driven from one seeded generator, so a configuration always produces the
//! same trace and metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rebalance, ClusterError, FaultPlan, Load, PlacementMap, Recorder, SimConfig};
use crate::model::{ExecutionGraph, InstanceBody, InstanceId, Message, MessageId, Payload, SourceId};
use crate::orchestration::Registry;
use crate::partition::{
    partition_of, Effect, FlushJob, InstanceData, Observation, PartitionRuntime, PartitionState, RuntimeConfig,
    RuntimeError, StepJob, TaskJob,
};
use crate::storage::{Storage, StorageError};
use crate::transport::{Envelope, EnvelopePayload, Transport};
use crate::workloads::ACCOUNT;

const TICK_US: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestMetrics {
    pub request: u64,
    pub instance: InstanceId,
    pub start_us: u64,
    pub completion_us: Option<u64>,
    pub flush_waits: u32,
    pub result: Option<Payload>,
    /// How often a completion was reported; exactly once when all is well.
    pub completions: u32,
}

impl RequestMetrics {
    pub fn latency_us(&self) -> Option<u64> {
        self.completion_us.map(|c| c - self.start_us)
    }
}

pub struct SimOutput {
    pub graph: ExecutionGraph,
    /// Observations the graph refused while recording.
    pub recorder_violations: Vec<String>,
    pub requests: Vec<RequestMetrics>,
    /// Completions per simulated second.
    pub throughput: Vec<u64>,
    /// Commit log appends per partition.
    pub flushes: Vec<u64>,
    pub rewinds: u64,
    pub crashes: u64,
    pub moves: u64,
    pub negative_balances: u64,
    pub complete: bool,
    pub end_us: u64,
    pub storage: Storage,
}

impl SimOutput {
    /// Recovered state of every partition with all instances loaded.
    pub fn final_states(&self) -> Result<Vec<PartitionState>, StorageError> {
        (0..self.flushes.len() as u32)
            .map(|p| {
                let (mut s, _) = self.storage.recover(p)?;
                self.storage.materialize_all(p, &mut s)?;
                Ok(s)
            })
            .collect()
    }

    pub fn entity_state(states: &[PartitionState], id: &InstanceId) -> Option<Payload> {
        let p = partition_of(id, states.len() as u32);
        match states[p as usize].instance_data(id) {
            Some(InstanceData::Entity(s)) => Some(s.user_state.clone()),
            _ => None,
        }
    }
}

/// Message ids and per-partition sequence numbers handed out to clients.
#[derive(Debug, Default)]
pub(super) struct ClientIds {
    counter: BTreeMap<u32, u64>,
    seq: BTreeMap<(u32, u32), u64>,
}

impl ClientIds {
    pub(super) fn envelope(
        &mut self,
        client: u32,
        target: InstanceId,
        body: InstanceBody,
        partitions: u32,
    ) -> (MessageId, Envelope) {
        let counter = self.counter.entry(client).or_insert(0);
        *counter += 1;
        let id = MessageId { origin: SourceId::Client(client), incarnation: 0, counter: *counter };
        let p = partition_of(&target, partitions);
        let seq = self.seq.entry((client, p)).or_insert(0);
        *seq += 1;
        let env = Envelope {
            target_partition: p,
            source: SourceId::Client(client),
            seq: *seq,
            payload: EnvelopePayload::Message(Message::instance(id, target, body)),
            speculation_tag: None,
            known_incarnation: 0,
        };
        (id, env)
    }
}

enum Job {
    Step(StepJob),
    Task(TaskJob),
}

enum Ev {
    Inject(u64),
    Deliver(Envelope),
    JobDone { node: u32, node_gen: u64, partition: u32, gen: u64, job: Job },
    FlushDone { partition: u32, gen: u64, job: FlushJob },
    Start { partition: u32, node: u32 },
    Crash(u32),
    Restart(u32),
    Rebalance,
    Tick,
}

struct Scheduled {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Node {
    up: bool,
    gen: u64,
    free_cores: u32,
    queue: VecDeque<(u32, u64, Job)>,
}

struct Hosted {
    node: u32,
    gen: u64,
    rt: PartitionRuntime,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    registry: Arc<Registry>,
    storage: Storage,
    transport: Transport,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    /// Queued events other than ticks.
    work: u64,
    nodes: Vec<Node>,
    hosts: Vec<Option<Hosted>>,
    placement: PlacementMap,
    next_gen: u64,
    recorder: Recorder,
    requests: Vec<RequestMetrics>,
    by_instance: BTreeMap<InstanceId, usize>,
    request_client: Vec<u32>,
    client_ids: ClientIds,
    injected: u64,
    outstanding: u64,
    crashes: u64,
    moves: u64,
    /// Rewinds of runtimes that are gone.
    rewinds: u64,
    negative_balances: u64,
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput, ClusterError> {
    cfg.validate()?;
    let storage = Storage::in_memory();
    let transport = Transport::new(storage.blobs().clone());
    let sim = Sim {
        cfg,
        registry: Arc::new(cfg.workload.registry()),
        storage,
        transport,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        work: 0,
        nodes: (0..cfg.nodes)
            .map(|_| Node { up: true, gen: 0, free_cores: cfg.cores_per_node, queue: VecDeque::new() })
            .collect(),
        hosts: (0..cfg.partitions).map(|_| None).collect(),
        placement: PlacementMap::round_robin(cfg.partitions, cfg.start_nodes),
        next_gen: 0,
        recorder: Recorder::new(),
        requests: Vec::new(),
        by_instance: BTreeMap::new(),
        request_client: Vec::new(),
        client_ids: ClientIds::default(),
        injected: 0,
        outstanding: 0,
        crashes: 0,
        moves: 0,
        rewinds: 0,
        negative_balances: 0,
    };
    sim.run()
}

fn runtime_err(partition: u32) -> impl Fn(RuntimeError) -> ClusterError {
    move |source| ClusterError::Runtime { partition, source }
}

pub(super) fn storage_err(partition: u32) -> impl Fn(StorageError) -> ClusterError {
    move |e| ClusterError::Runtime { partition, source: RuntimeError::Storage(e) }
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, ev: Ev) {
        if !matches!(ev, Ev::Tick) {
            self.work += 1;
        }
        self.seq += 1;
        self.heap.push(Scheduled { at, seq: self.seq, ev });
    }

    fn run(mut self) -> Result<SimOutput, ClusterError> {
        for p in 0..self.cfg.partitions {
            let node = self.placement.node_of(p).expect("all partitions placed");
            self.schedule(0, Ev::Start { partition: p, node });
        }
        match &self.cfg.load {
            Load::Open { .. } => self.schedule(0, Ev::Inject(0)),
            Load::Closed { clients } => {
                // staggered over the first 100 ms
                for c in 0..*clients {
                    let at = self.rng.gen_range(0..100_000);
                    self.schedule(at, Ev::Inject(u64::from(c)));
                }
            }
            Load::Scripted(script) => {
                for (i, r) in script.iter().enumerate() {
                    self.schedule(r.at_us, Ev::Inject(i as u64));
                }
            }
        }
        if let FaultPlan::Scripted(script) = &self.cfg.faults {
            for (at, node) in script.clone() {
                self.schedule(at, Ev::Crash(node));
            }
        }
        if let Some(at) = self.cfg.rebalance_at_us {
            self.schedule(at, Ev::Rebalance);
        }
        self.schedule(TICK_US, Ev::Tick);

        let fault_until = match self.cfg.faults {
            FaultPlan::Random { probability, until } => Some((probability, (self.cfg.duration_us as f64 * until) as u64)),
            _ => None,
        };
        let mut complete = false;
        while let Some(Scheduled { at, ev, .. }) = self.heap.pop() {
            if at > self.cfg.max_time_us {
                break;
            }
            self.now = at;
            let is_tick = matches!(ev, Ev::Tick);
            if !is_tick {
                self.work -= 1;
            }
            self.handle(ev)?;
            if let Some((probability, until)) = fault_until {
                if !is_tick && self.now < until && self.rng.gen_bool(probability) {
                    let up: Vec<u32> = (0..self.cfg.nodes).filter(|n| self.nodes[*n as usize].up).collect();
                    if !up.is_empty() {
                        let n = up[self.rng.gen_range(0..up.len())];
                        self.crash(n)?;
                    }
                }
            }
            if self.finished() {
                complete = self.settled();
                if complete || matches!(self.cfg.load, Load::Closed { .. }) {
                    break;
                }
            }
        }
        self.recorder.graph.set_complete(complete);
        let mut throughput = vec![0u64; self.now.div_ceil(TICK_US).max(1) as usize];
        for r in &self.requests {
            if let Some(c) = r.completion_us {
                let i = ((c / TICK_US) as usize).min(throughput.len() - 1);
                throughput[i] += 1;
            }
        }
        let flushes = (0..self.cfg.partitions).map(|p| self.storage.flush_count(p)).collect();
        let rewinds = self.rewinds + self.hosts.iter().flatten().map(|h| h.rt.rewinds).sum::<u64>();
        Ok(SimOutput {
            graph: self.recorder.graph,
            recorder_violations: self.recorder.violations,
            requests: self.requests,
            throughput,
            flushes,
            rewinds,
            crashes: self.crashes,
            moves: self.moves,
            negative_balances: self.negative_balances,
            complete,
            end_us: self.now,
            storage: self.storage,
        })
    }

    /// No more requests will arrive and every issued one has completed.
    fn finished(&self) -> bool {
        match &self.cfg.load {
            Load::Open { requests, .. } => self.injected == *requests && self.outstanding == 0,
            Load::Closed { .. } => self.now >= self.cfg.duration_us,
            Load::Scripted(s) => self.injected == s.len() as u64,
        }
    }

    /// Nothing is left to do anywhere.
    fn settled(&self) -> bool {
        self.work == 0
            && self.nodes.iter().all(|n| n.up)
            && self.hosts.iter().all(|h| h.as_ref().is_some_and(|h| h.rt.is_idle()))
            && (0..self.cfg.partitions)
                .all(|p| self.hosts[p as usize].as_ref().is_some_and(|h| h.rt.read_pos() == self.transport.qlen(p)))
    }

    fn handle(&mut self, ev: Ev) -> Result<(), ClusterError> {
        match ev {
            Ev::Inject(i) => self.inject(i),
            Ev::Deliver(env) => {
                let p = env.target_partition;
                self.transport.qsend(env).map_err(storage_err(p))?;
                self.pump(p)
            }
            Ev::JobDone { node, node_gen, partition, gen, job } => {
                let n = &mut self.nodes[node as usize];
                if n.gen != node_gen {
                    return Ok(());
                }
                n.free_cores += 1;
                if let Some(h) = self.hosts[partition as usize].as_mut().filter(|h| h.gen == gen) {
                    let effects = match job {
                        Job::Step(j) => h.rt.step_done(j.execute()),
                        Job::Task(j) => {
                            let mut task_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
                            h.rt.task_done(j.execute(&mut task_rng))
                        }
                    }
                    .map_err(runtime_err(partition))?;
                    self.process(partition, effects)?;
                }
                self.run_queue(node);
                Ok(())
            }
            Ev::FlushDone { partition, gen, job } => {
                let now = self.now;
                let Some(h) = self.hosts[partition as usize].as_mut().filter(|h| h.gen == gen) else { return Ok(()) };
                job.execute(&self.storage).map_err(storage_err(partition))?;
                let effects = h.rt.flushed(job.through(), now).map_err(runtime_err(partition))?;
                self.process(partition, effects)
            }
            Ev::Start { partition, node } => self.start(partition, node),
            Ev::Crash(node) => self.crash(node),
            Ev::Restart(node) => {
                self.nodes[node as usize].up = true;
                for p in self.placement.partitions_on(node) {
                    self.start(p, node)?;
                }
                Ok(())
            }
            Ev::Rebalance => self.rebalance(),
            Ev::Tick => {
                for p in 0..self.cfg.partitions {
                    let now = self.now;
                    if let Some(h) = self.hosts[p as usize].as_mut() {
                        let effects = h.rt.tick(now).map_err(runtime_err(p))?;
                        self.process(p, effects)?;
                    }
                }
                self.schedule(self.now + TICK_US, Ev::Tick);
                Ok(())
            }
        }
    }

    fn inject(&mut self, i: u64) -> Result<(), ClusterError> {
        let (client, target, body) = match &self.cfg.load {
            Load::Scripted(script) => {
                let r = &script[i as usize];
                (0, r.target.clone(), r.body.clone())
            }
            Load::Open { .. } | Load::Closed { .. } => {
                let index = self.requests.len() as u64;
                let (instance, input) = self.cfg.workload.request(index, &mut self.rng);
                self.by_instance.insert(instance.clone(), self.requests.len());
                self.requests.push(RequestMetrics {
                    request: index,
                    instance: instance.clone(),
                    start_us: self.now,
                    completion_us: None,
                    flush_waits: 0,
                    result: None,
                    completions: 0,
                });
                self.outstanding += 1;
                let client = if let Load::Closed { .. } = self.cfg.load { i as u32 } else { 0 };
                self.request_client.push(client);
                (client, instance.clone(), InstanceBody::Start { orchestration: instance.name, input })
            }
        };
        self.injected += 1;
        if let Load::Open { requests, rate } = self.cfg.load {
            if self.injected < requests {
                let u: f64 = self.rng.gen_range(f64::EPSILON..1.0);
                let gap = (-u.ln() / rate * 1e6) as u64;
                self.schedule(self.now + gap.max(1), Ev::Inject(i + 1));
            }
        }
        let (id, env) = self.client_ids.envelope(client, target, body, self.cfg.partitions);
        self.recorder.input(id);
        self.schedule(self.now + self.cfg.costs.hop_us, Ev::Deliver(env));
        Ok(())
    }

    fn start(&mut self, partition: u32, node: u32) -> Result<(), ClusterError> {
        if !self.nodes[node as usize].up
            || self.placement.node_of(partition) != Some(node)
            || self.hosts[partition as usize].is_some()
        {
            return Ok(());
        }
        let mut rc = RuntimeConfig::new(partition, self.cfg.partitions, node, self.cfg.mode);
        rc.cache_budget = self.cfg.cache_budget;
        rc.checkpoint_events = self.cfg.checkpoint_events;
        match PartitionRuntime::start(rc, self.registry.clone(), self.storage.clone(), self.now) {
            Ok((rt, effects)) => {
                self.next_gen += 1;
                self.hosts[partition as usize] = Some(Hosted { node, gen: self.next_gen, rt });
                self.process(partition, effects)?;
                self.pump(partition)
            }
            Err(RuntimeError::Storage(StorageError::LeaseHeld { expires_us, .. })) => {
                self.schedule(expires_us.max(self.now + 1), Ev::Start { partition, node });
                Ok(())
            }
            Err(e) => Err(runtime_err(partition)(e)),
        }
    }

    fn crash(&mut self, node: u32) -> Result<(), ClusterError> {
        let n = &mut self.nodes[node as usize];
        if !n.up {
            return Ok(());
        }
        n.up = false;
        n.gen += 1;
        n.free_cores = self.cfg.cores_per_node;
        n.queue.clear();
        self.crashes += 1;
        for p in 0..self.cfg.partitions {
            if self.hosts[p as usize].as_ref().is_some_and(|h| h.node == node) {
                self.rewinds += self.hosts[p as usize].take().map_or(0, |h| h.rt.rewinds);
                self.recorder.crash(p);
            }
        }
        let delay = self.rng.gen_range(self.cfg.costs.restart_min_us..=self.cfg.costs.restart_max_us);
        self.schedule(self.now + delay, Ev::Restart(node));
        Ok(())
    }

    fn rebalance(&mut self) -> Result<(), ClusterError> {
        let nodes: Vec<u32> = (0..self.cfg.nodes).collect();
        let moves = rebalance(&self.placement, &nodes);
        self.placement.apply(&moves);
        self.moves += moves.len() as u64;
        for m in moves {
            let p = m.partition;
            if let Some(h) = self.hosts[p as usize].take() {
                self.rewinds += h.rt.rewinds;
                let effects = h.rt.stop(self.now).map_err(runtime_err(p))?;
                self.process(p, effects)?;
            }
            if let Some(to) = m.to {
                self.schedule(self.now + self.cfg.costs.move_us, Ev::Start { partition: p, node: to });
            }
        }
        Ok(())
    }

    /// Feeds the partition everything waiting in its input queue.
    fn pump(&mut self, p: u32) -> Result<(), ClusterError> {
        loop {
            let Some(h) = self.hosts[p as usize].as_mut() else { return Ok(()) };
            let entries = self.transport.qreceive(p, h.rt.fetch_pos(), h.rt.max_batch()).map_err(storage_err(p))?;
            if entries.is_empty() {
                return Ok(());
            }
            let effects = h.rt.on_input(&entries).map_err(runtime_err(p))?;
            self.process(p, effects)?;
        }
    }

    fn process(&mut self, p: u32, effects: Vec<Effect>) -> Result<(), ClusterError> {
        let host = self.hosts[p as usize].as_ref().map(|h| (h.node, h.gen));
        for e in effects {
            match e {
                Effect::RunStep(job) => {
                    if let Some((node, gen)) = host {
                        self.enqueue(node, p, gen, Job::Step(job));
                    }
                }
                Effect::RunTask(job) => {
                    if let Some((node, gen)) = host {
                        self.enqueue(node, p, gen, Job::Task(job));
                    }
                }
                Effect::Flush(job) => {
                    if let Some((_, gen)) = host {
                        self.schedule(self.now + self.cfg.costs.flush_us, Ev::FlushDone { partition: p, gen, job });
                    }
                }
                Effect::Send(envs) => {
                    for env in envs {
                        self.schedule(self.now + self.cfg.costs.hop_us, Ev::Deliver(env));
                    }
                }
                Effect::Completed { instance, result, flush_waits } => self.complete(instance, result, flush_waits),
                Effect::Observe(o) => {
                    if let Observation::EntityState { instance, state } = &o {
                        if instance.name == ACCOUNT && state.parse::<i64>().is_ok_and(|b| b < 0) {
                            self.negative_balances += 1;
                        }
                    }
                    self.recorder.observe(o);
                }
            }
        }
        Ok(())
    }

    fn complete(&mut self, instance: InstanceId, result: Payload, flush_waits: u32) {
        let Some(&i) = self.by_instance.get(&instance) else { return };
        let r = &mut self.requests[i];
        r.completions += 1;
        if r.completion_us.is_some() {
            return;
        }
        r.completion_us = Some(self.now);
        r.flush_waits = flush_waits;
        r.result = Some(result);
        self.outstanding -= 1;
        if let Load::Closed { .. } = self.cfg.load {
            if self.now < self.cfg.duration_us {
                // the client that issued it goes again
                self.schedule(self.now, Ev::Inject(u64::from(self.request_client[i])));
            }
        }
    }

    fn enqueue(&mut self, node: u32, p: u32, gen: u64, job: Job) {
        self.nodes[node as usize].queue.push_back((p, gen, job));
        self.run_queue(node);
    }

    fn run_queue(&mut self, node: u32) {
        loop {
            let n = &mut self.nodes[node as usize];
            if !n.up || n.free_cores == 0 {
                return;
            }
            let Some((partition, gen, job)) = n.queue.pop_front() else { return };
            n.free_cores -= 1;
            let node_gen = n.gen;
            let cost = match &job {
                Job::Step(_) => self.cfg.costs.step_us,
                Job::Task(_) => self.rng.gen_range(self.cfg.costs.task_min_us..=self.cfg.costs.task_max_us),
            };
            self.schedule(self.now + cost, Ev::JobDone { node, node_gen, partition, gen, job });
        }
    }
}
