//! Wall-clock driver for benchmarks. Each partition gets an owner thread
//! running its [`PartitionRuntime`]; steps and tasks go to a shared worker
//! pool, and commit log appends to a flusher thread per partition so the
//! owner keeps going while a flush is outstanding. Storage and queues live
//! in files under a directory. No faults are injected.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sim::{storage_err, ClientIds, RequestMetrics};
use super::{ClusterError, FaultPlan, Load, Recorder, SimConfig};
use crate::model::{ExecutionGraph, InstanceBody, InstanceId, LogPosition, Payload};
use crate::orchestration::Registry;
use crate::partition::{
    Effect, FlushJob, PartitionRuntime, RuntimeConfig, RuntimeError, StepJob, StepOutput, TaskJob,
    TaskOutput,
};
use crate::storage::{FsBlobStore, Storage};
use crate::transport::Transport;

const TICK: Duration = Duration::from_secs(1);

pub struct RealtimeOutput {
    pub graph: ExecutionGraph,
    pub recorder_violations: Vec<String>,
    pub requests: Vec<RequestMetrics>,
    /// Completions per wall-clock second.
    pub throughput: Vec<u64>,
    pub flushes: Vec<u64>,
    pub rewinds: u64,
    pub complete: bool,
    pub elapsed: Duration,
}

enum ToOwner {
    Input,
    Step(StepOutput),
    Task(TaskOutput),
    Flushed(LogPosition),
    /// Reply whether the partition has nothing left to do.
    Probe(Sender<bool>),
    Stop,
}

enum Work {
    Step(u32, StepJob),
    Task(u32, TaskJob),
}

#[derive(Default)]
struct Requests {
    list: Vec<RequestMetrics>,
    by_instance: BTreeMap<InstanceId, usize>,
    client_of: Vec<u32>,
    ids: ClientIds,
    outstanding: u64,
}

struct Shared {
    cfg: SimConfig,
    start: Instant,
    transport: Transport,
    owners: Vec<Sender<ToOwner>>,
    recorder: Mutex<Recorder>,
    requests: Mutex<Requests>,
    rng: Mutex<ChaCha8Rng>,
}

impl Shared {
    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn inject(&self, client: u32) -> Result<(), ClusterError> {
        let mut guard = self.requests.lock().unwrap();
        let reqs = &mut *guard;
        let index = reqs.list.len() as u64;
        let (instance, input) = self.cfg.workload.request(index, &mut *self.rng.lock().unwrap());
        reqs.by_instance.insert(instance.clone(), reqs.list.len());
        reqs.list.push(RequestMetrics {
            request: index,
            instance: instance.clone(),
            start_us: self.now_us(),
            completion_us: None,
            flush_waits: 0,
            result: None,
            completions: 0,
        });
        reqs.client_of.push(client);
        reqs.outstanding += 1;
        let body = InstanceBody::Start { orchestration: instance.name.clone(), input };
        let (id, env) = reqs.ids.envelope(client, instance, body, self.cfg.partitions);
        self.recorder.lock().unwrap().input(id);
        let p = env.target_partition;
        self.transport.qsend(env).map_err(storage_err(p))?;
        drop(guard);
        let _ = self.owners[p as usize].send(ToOwner::Input);
        Ok(())
    }

    fn complete(&self, instance: InstanceId, result: Payload, flush_waits: u32) -> Result<(), ClusterError> {
        let now = self.now_us();
        let mut reqs = self.requests.lock().unwrap();
        let Some(&i) = reqs.by_instance.get(&instance) else { return Ok(()) };
        let r = &mut reqs.list[i];
        r.completions += 1;
        if r.completion_us.is_some() {
            return Ok(());
        }
        r.completion_us = Some(now);
        r.flush_waits = flush_waits;
        r.result = Some(result);
        reqs.outstanding -= 1;
        let client = reqs.client_of[i];
        drop(reqs);
        if matches!(self.cfg.load, Load::Closed { .. }) && now < self.cfg.duration_us {
            self.inject(client)?;
        }
        Ok(())
    }
}

fn owner_loop(
    shared: Arc<Shared>,
    rc: RuntimeConfig,
    registry: Arc<Registry>,
    storage: Storage,
    rx: Receiver<ToOwner>,
    work: Sender<Work>,
) -> Result<u64, ClusterError> {
    let p = rc.partition;
    let rt_err = move |source: RuntimeError| ClusterError::Runtime { partition: p, source };
    let (flush_tx, flush_rx) = mpsc::channel::<FlushJob>();
    let flusher = {
        let storage = storage.clone();
        let owner = shared.owners[p as usize].clone();
        thread::spawn(move || -> Result<(), ClusterError> {
            for job in flush_rx {
                job.execute(&storage).map_err(storage_err(p))?;
                let _ = owner.send(ToOwner::Flushed(job.through()));
            }
            Ok(())
        })
    };
    let handle = |effects: Vec<Effect>| -> Result<(), ClusterError> {
        for e in effects {
            match e {
                Effect::RunStep(job) => {
                    let _ = work.send(Work::Step(p, job));
                }
                Effect::RunTask(job) => {
                    let _ = work.send(Work::Task(p, job));
                }
                Effect::Flush(job) => {
                    let _ = flush_tx.send(job);
                }
                Effect::Send(envs) => {
                    for env in envs {
                        let q = env.target_partition;
                        shared.transport.qsend(env).map_err(storage_err(q))?;
                        let _ = shared.owners[q as usize].send(ToOwner::Input);
                    }
                }
                Effect::Completed { instance, result, flush_waits } => shared.complete(instance, result, flush_waits)?,
                Effect::Observe(o) => shared.recorder.lock().unwrap().observe(o),
            }
        }
        Ok(())
    };
    let (mut rt, effects) = PartitionRuntime::start(rc, registry, storage, shared.now_us()).map_err(rt_err)?;
    handle(effects)?;
    let mut next_tick = Instant::now() + TICK;
    loop {
        let msg = match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        if Instant::now() >= next_tick {
            let effects = rt.tick(shared.now_us()).map_err(rt_err)?;
            handle(effects)?;
            next_tick += TICK;
        }
        let effects = match msg {
            None => continue,
            Some(ToOwner::Input) => {
                loop {
                    let entries =
                        shared.transport.qreceive(p, rt.fetch_pos(), rt.max_batch()).map_err(storage_err(p))?;
                    if entries.is_empty() {
                        break;
                    }
                    let effects = rt.on_input(&entries).map_err(rt_err)?;
                    handle(effects)?;
                }
                continue;
            }
            Some(ToOwner::Step(out)) => rt.step_done(out).map_err(rt_err)?,
            Some(ToOwner::Task(out)) => rt.task_done(out).map_err(rt_err)?,
            Some(ToOwner::Flushed(through)) => rt.flushed(through, shared.now_us()).map_err(rt_err)?,
            Some(ToOwner::Probe(reply)) => {
                let _ = reply.send(rt.is_idle() && rt.fetch_pos() == shared.transport.qlen(p));
                continue;
            }
            Some(ToOwner::Stop) => break,
        };
        handle(effects)?;
    }
    let rewinds = rt.rewinds;
    // anything still unflushed is given up, as on a crash
    drop(flush_tx);
    flusher.join().expect("flusher thread")?;
    Ok(rewinds)
}

fn worker_loop(jobs: Arc<Mutex<Receiver<Work>>>, owners: Vec<Sender<ToOwner>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let job = jobs.lock().unwrap().recv();
        match job {
            Ok(Work::Step(p, job)) => {
                let _ = owners[p as usize].send(ToOwner::Step(job.execute()));
            }
            Ok(Work::Task(p, job)) => {
                let _ = owners[p as usize].send(ToOwner::Task(job.execute(&mut rng)));
            }
            Err(_) => return,
        }
    }
}

/// Runs `cfg` on real threads with file-backed storage under `dir`.
/// `cores_per_node × nodes` workers execute steps and tasks. Faults and
/// rebalancing are not supported here.
pub fn run_realtime(cfg: &SimConfig, dir: &Path) -> Result<RealtimeOutput, ClusterError> {
    cfg.validate()?;
    if cfg.faults != FaultPlan::None || cfg.rebalance_at_us.is_some() {
        return Err(ClusterError::ConfigInvalid("real-time runs take neither faults nor a rebalance".into()));
    }
    let blobs = Arc::new(FsBlobStore::open(dir).map_err(storage_err(0))?);
    let storage = Storage::new(blobs.clone());
    let registry = Arc::new(cfg.workload.registry());
    let (owner_txs, owner_rxs): (Vec<_>, Vec<_>) = (0..cfg.partitions).map(|_| mpsc::channel::<ToOwner>()).unzip();
    let shared = Arc::new(Shared {
        cfg: cfg.clone(),
        start: Instant::now(),
        transport: Transport::new(blobs),
        owners: owner_txs.clone(),
        recorder: Mutex::new(Recorder::new()),
        requests: Mutex::new(Requests::default()),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
    });

    let (work_tx, work_rx) = mpsc::channel::<Work>();
    let work_rx = Arc::new(Mutex::new(work_rx));
    let workers: Vec<_> = (0..cfg.nodes * cfg.cores_per_node)
        .map(|i| {
            let (jobs, owners) = (work_rx.clone(), owner_txs.clone());
            let seed = cfg.seed ^ (u64::from(i) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            thread::spawn(move || worker_loop(jobs, owners, seed))
        })
        .collect();
    let owners: Vec<_> = owner_rxs
        .into_iter()
        .enumerate()
        .map(|(p, rx)| {
            let mut rc = RuntimeConfig::new(p as u32, cfg.partitions, 0, cfg.mode);
            rc.cache_budget = cfg.cache_budget;
            rc.checkpoint_events = cfg.checkpoint_events;
            let (shared, registry, storage, work) = (shared.clone(), registry.clone(), storage.clone(), work_tx.clone());
            thread::spawn(move || owner_loop(shared, rc, registry, storage, rx, work))
        })
        .collect();
    drop(work_tx);

    let driven = drive(&shared);
    for tx in &owner_txs {
        let _ = tx.send(ToOwner::Stop);
    }
    let mut rewinds = 0;
    let mut owner_err = None;
    for h in owners {
        match h.join().expect("owner thread") {
            Ok(r) => rewinds += r,
            Err(e) => {
                owner_err.get_or_insert(e);
            }
        }
    }
    drop(owner_txs);
    for w in workers {
        let _ = w.join();
    }
    let complete = driven?;
    if let Some(e) = owner_err {
        return Err(e);
    }
    let elapsed = shared.start.elapsed();
    let shared = Arc::try_unwrap(shared).ok().expect("all threads joined");
    let mut recorder = shared.recorder.into_inner().unwrap();
    recorder.graph.set_complete(complete);
    let requests = shared.requests.into_inner().unwrap().list;
    let secs = elapsed.as_micros().div_ceil(1_000_000).max(1) as usize;
    let mut throughput = vec![0u64; secs];
    for c in requests.iter().filter_map(|r| r.completion_us) {
        throughput[((c / 1_000_000) as usize).min(secs - 1)] += 1;
    }
    Ok(RealtimeOutput {
        graph: recorder.graph,
        recorder_violations: recorder.violations,
        requests,
        throughput,
        flushes: (0..cfg.partitions).map(|p| storage.flush_count(p)).collect(),
        rewinds,
        complete,
        elapsed,
    })
}

/// Injects the load and waits until every partition is idle. Returns
/// whether the run settled before `max_time`.
fn drive(shared: &Arc<Shared>) -> Result<bool, ClusterError> {
    let cfg = &shared.cfg;
    let deadline = shared.start + Duration::from_micros(cfg.max_time_us);
    match &cfg.load {
        Load::Open { requests, rate } => {
            let mut at = Duration::ZERO;
            for _ in 0..*requests {
                let u: f64 = shared.rng.lock().unwrap().gen_range(f64::EPSILON..1.0);
                at += Duration::from_secs_f64(-u.ln() / rate);
                thread::sleep((shared.start + at).saturating_duration_since(Instant::now()));
                shared.inject(0)?;
            }
        }
        Load::Closed { clients } => {
            for c in 0..*clients {
                shared.inject(c)?;
            }
            thread::sleep(Duration::from_micros(cfg.duration_us).saturating_sub(shared.start.elapsed()));
        }
        Load::Scripted(_) => return Err(ClusterError::ConfigInvalid("scripted load is simulation only".into())),
    }
    while Instant::now() < deadline {
        let outstanding = shared.requests.lock().unwrap().outstanding;
        if outstanding == 0 || matches!(cfg.load, Load::Closed { .. }) {
            let (tx, rx) = mpsc::channel();
            for o in &shared.owners {
                let _ = o.send(ToOwner::Probe(tx.clone()));
            }
            drop(tx);
            if rx.iter().take(shared.owners.len()).filter(|idle| *idle).count() == shared.owners.len() {
                return Ok(true);
            }
            if matches!(cfg.load, Load::Closed { .. }) {
                return Ok(false);
            }
        }
        thread::sleep(Duration::from_millis(5));
    }
    Ok(false)
}
