use std::collections::{BTreeMap, HashMap};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::dataset::{self, SplitDataset};
use crate::ensemble::{self, Combo, Ensemble, PreparedData, VotingMode};
use crate::models::{Hyperparams, TrainedModel};
use crate::protocol::{
    ErrorBody, JobRequest, LoadReport, Payload, PlacementDecision, PlacementResponse, ProtocolError, Task,
    TaskDispatch, TaskOutput, TaskResult,
};

use super::config::NodeConfig;
use super::executor::{ExecContext, Executor, TaskFailure};
use super::job::{JobRecord, JobState};
use super::load::LoadSampler;
use super::net::{self, Endpoint};
use super::registry::{arbitrate, Snapshot, WorkerRegistry};
use super::{NodeError, Result};

const LOAD_QUERY_TIMEOUT: Duration = Duration::from_secs(1);

struct LocalActor {
    executor: Executor,
    sampler: Mutex<LoadSampler>,
}

struct MasterShared {
    cfg: NodeConfig,
    endpoint: Endpoint,
    address: String,
    clock: Instant,
    registry: RwLock<WorkerRegistry>,
    jobs: Mutex<HashMap<(String, u64), JobRecord>>,
    actors: BTreeMap<String, LocalActor>,
    /// Executes BrokerSelf placements.
    self_exec: Executor,
    next_job: AtomicU64,
    stop: AtomicBool,
}

fn poisoned<T>(_: T) -> NodeError {
    NodeError::Io(std::io::Error::other("lock poisoned"))
}

impl MasterShared {
    fn now_ms(&self) -> u64 {
        self.clock.elapsed().as_millis() as u64
    }

    fn local_report(&self, actor: &LocalActor) -> LoadReport {
        let (cpu_load, mem_load) = actor.sampler.lock().expect("sampler lock").sample();
        LoadReport { cpu_load, mem_load, queue_length: actor.executor.queue_length(), taken_at: self.now_ms() }
    }

    fn query_remote_load(&self, id: &str, address: &str) -> Result<LoadReport> {
        let mut conn = net::connect(address, LOAD_QUERY_TIMEOUT)?;
        conn.set_read_timeout(Some(LOAD_QUERY_TIMEOUT))?;
        self.endpoint.send(&mut conn, id, Payload::LoadQuery)?;
        let (msg, _) = self.endpoint.recv(&mut conn)?;
        match msg.payload {
            Payload::LoadReport(r) => Ok(r),
            other => Err(NodeError::Unexpected { expected: "load_report", got: other.msg_type().to_string() }),
        }
    }

    /// Refreshes every healthy worker's load (one query each, in id order)
    /// and returns the snapshot to arbitrate on.
    fn check_loads(&self) -> Snapshot {
        let now = self.now_ms();
        let targets: Vec<(String, String, bool)> = {
            let reg = self.registry.read().expect("registry lock");
            reg.healthy_ids(now)
                .into_iter()
                .filter_map(|id| reg.get(&id).map(|e| (id, e.address.clone(), e.local)))
                .collect()
        };
        let mut failed = Vec::new();
        for (id, address, local) in targets {
            let report = if local {
                Ok(self.local_report(&self.actors[&id]))
            } else {
                self.query_remote_load(&id, &address)
            };
            match report {
                Ok(r) => {
                    self.registry.write().expect("registry lock").report(&id, r, self.now_ms());
                }
                Err(e) => {
                    debug!("load check on {id} failed: {e}");
                    failed.push(id);
                }
            }
        }
        let mut snap =
            self.registry.read().expect("registry lock").snapshot(self.now_ms(), &self.cfg.node_id, &self.address);
        for w in snap.workers.iter_mut().filter(|w| failed.contains(&w.id)) {
            w.healthy = false;
        }
        snap
    }

    fn handle_job_request(&self, gateway: &str, req: &JobRequest, received: Instant) -> PlacementResponse {
        let mut record = JobRecord::new(req.job_id, gateway, self.now_ms());
        record.advance(JobState::Arbitrating, self.now_ms()).expect("fresh job");
        let snap = self.check_loads();
        let placement = arbitrate(&snap, self.cfg.heavy_load_threshold, self.cfg.cloud_enabled);
        let arbitration_ms = received.elapsed().as_secs_f64() * 1000.0;
        record.advance(JobState::Dispatched, self.now_ms()).expect("arbitrating job");
        record.placement = Some(placement.clone());
        debug!("job {} from {gateway}: {:?} -> {}", req.job_id, placement.decision, placement.target_id);
        self.jobs.lock().expect("jobs lock").insert((gateway.to_string(), req.job_id), record);
        PlacementResponse {
            job_id: req.job_id,
            decision: placement.decision,
            target_id: placement.target_id,
            target_address: placement.target_address,
            via_cloud: placement.via_cloud,
            arbitration_ms,
        }
    }

    fn forward_to_cloud(&self, d: TaskDispatch) -> std::result::Result<TaskResult, TaskFailure> {
        let job_id = d.job_id;
        let fail = |e: &dyn std::fmt::Display| TaskFailure {
            job_id,
            code: "cloud_forwarding".into(),
            detail: e.to_string(),
        };
        let address = self.cfg.cloud_address.as_deref().ok_or_else(|| fail(&"no cloud address configured"))?;
        let mut conn = net::connect(address, self.cfg.dispatch_timeout()).map_err(|e| fail(&e))?;
        conn.set_read_timeout(Some(self.cfg.dispatch_timeout())).map_err(|e| fail(&e))?;
        self.endpoint.send(&mut conn, &self.cfg.cloud_id, Payload::TaskDispatch(d)).map_err(|e| fail(&e))?;
        let (msg, _) = self.endpoint.recv(&mut conn).map_err(|e| fail(&e))?;
        match msg.payload {
            Payload::TaskResult(r) => Ok(r),
            Payload::Error(e) => Err(TaskFailure { job_id, code: e.code, detail: e.detail }),
            other => Err(fail(&format!("cloud replied {}", other.msg_type()))),
        }
    }

    fn handle_dispatch(&self, gateway: &str, d: TaskDispatch) -> std::result::Result<TaskResult, TaskFailure> {
        let key = (gateway.to_string(), d.job_id);
        let placement = self.jobs.lock().expect("jobs lock").get(&key).and_then(|j| j.placement.clone());
        let result = match placement {
            Some(p) if p.decision == PlacementDecision::Cloud => self.forward_to_cloud(d),
            Some(p) if self.actors.contains_key(&p.target_id) => self.actors[&p.target_id].executor.run(d),
            _ => self.self_exec.run(d),
        };
        if let Some(job) = self.jobs.lock().expect("jobs lock").get_mut(&key) {
            let to = if result.is_ok() { JobState::Completed } else { JobState::Failed };
            if let Err(e) = job.advance(to, self.now_ms()) {
                warn!("{e}");
            }
        }
        result
    }

    fn serve(&self, mut stream: TcpStream) {
        let mut worker_id: Option<String> = None;
        loop {
            let (msg, _) = match self.endpoint.recv(&mut stream) {
                Ok(m) => m,
                Err(ProtocolError::Closed) => return,
                Err(ProtocolError::BadAuthTag) => {
                    if let Some(id) = &worker_id {
                        warn!("bad auth tag from worker {id}; marking it unhealthy");
                        self.registry.write().expect("registry lock").mark_compromised(id);
                    }
                    return;
                }
                Err(e) => {
                    debug!("dropping connection: {e}");
                    return;
                }
            };
            let received = Instant::now();
            let peer = msg.sender_id.clone();
            let reply = match msg.payload {
                Payload::RegisterWorker(r) => {
                    info!("worker {} registered at {}", r.worker_id, r.address);
                    self.registry.write().expect("registry lock").register(&r.worker_id, &r.address, self.now_ms(), false);
                    worker_id = Some(r.worker_id);
                    Some(Payload::Heartbeat)
                }
                Payload::LoadReport(r) => {
                    let known = self.registry.write().expect("registry lock").report(&peer, r, self.now_ms());
                    (!known).then(|| unregistered(&peer))
                }
                Payload::Heartbeat => {
                    let known = self.registry.write().expect("registry lock").touch(&peer, self.now_ms());
                    (!known).then(|| unregistered(&peer))
                }
                Payload::JobRequest(req) => Some(Payload::PlacementResponse(self.handle_job_request(&peer, &req, received))),
                Payload::TaskDispatch(d) => Some(match self.handle_dispatch(&peer, d) {
                    Ok(r) => Payload::TaskResult(r),
                    Err(f) => Payload::Error(f.to_body()),
                }),
                other => Some(Payload::Error(ErrorBody {
                    job_id: None,
                    code: "unexpected".into(),
                    detail: format!("master does not handle {}", other.msg_type()),
                })),
            };
            if let Some(reply) = reply {
                if let Err(e) = self.endpoint.send(&mut stream, &peer, reply) {
                    debug!("reply to {peer} failed: {e}");
                    return;
                }
            }
        }
    }

    fn train_remote(&self, id: &str, address: &str, d: TaskDispatch) -> Result<TaskResult> {
        let mut conn = net::connect(address, self.cfg.dispatch_timeout())?;
        conn.set_read_timeout(Some(self.cfg.dispatch_timeout()))?;
        self.endpoint.send(&mut conn, id, Payload::TaskDispatch(d))?;
        let (msg, _) = self.endpoint.recv(&mut conn)?;
        match msg.payload {
            Payload::TaskResult(r) => Ok(r),
            Payload::Error(e) => Err(NodeError::TaskFailure { job_id: e.job_id, code: e.code, detail: e.detail }),
            other => Err(NodeError::Unexpected { expected: "task_result", got: other.msg_type().to_string() }),
        }
    }
}

fn unregistered(peer: &str) -> Payload {
    Payload::Error(ErrorBody { job_id: None, code: "unregistered".into(), detail: format!("{peer} is not registered") })
}

pub struct MasterHandle {
    shared: Arc<MasterShared>,
    accept: Option<JoinHandle<()>>,
}

impl MasterHandle {
    pub fn address(&self) -> &str {
        &self.shared.address
    }

    pub fn node_id(&self) -> &str {
        &self.shared.cfg.node_id
    }

    /// Registered workers outside the master process.
    pub fn remote_workers(&self) -> usize {
        let reg = self.shared.registry.read().expect("registry lock");
        let now = self.shared.now_ms();
        reg.healthy_ids(now).iter().filter(|id| !self.shared.actors.contains_key(*id)).count()
    }

    pub fn wait_for_workers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.remote_workers() >= n {
                return true;
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.remote_workers() >= n
    }

    pub fn snapshot(&self) -> Snapshot {
        let now = self.shared.now_ms();
        self.shared.registry.read().expect("registry lock").snapshot(now, self.node_id(), self.address())
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        let mut jobs: Vec<JobRecord> = self.shared.jobs.lock().expect("jobs lock").values().cloned().collect();
        jobs.sort_by_key(|j| (j.transitions[0].1, j.job_id));
        jobs
    }

    /// Shards the training split exactly as [`ensemble::train_sharded`]
    /// does, trains member `i` on the `i mod n`-th healthy worker (sorted
    /// by id) and assembles the returned models in member order.
    pub fn distribute_training(
        &self,
        data: &PreparedData,
        split: &SplitDataset,
        combo: &Combo,
        hp: &Hyperparams,
        mode: VotingMode,
        seed: u64,
    ) -> Result<Ensemble> {
        let s = &self.shared;
        let job_id = s.next_job.fetch_add(1, Ordering::Relaxed);
        let key = (s.cfg.node_id.clone(), job_id);
        let mut record = JobRecord::new(job_id, &s.cfg.node_id, s.now_ms());
        record.advance(JobState::Arbitrating, s.now_ms()).expect("fresh job");
        let workers: Vec<(String, String)> = {
            let reg = s.registry.read().map_err(poisoned)?;
            reg.healthy_ids(s.now_ms())
                .into_iter()
                .filter_map(|id| reg.get(&id).map(|e| (id, e.address.clone())))
                .collect()
        };
        let result = self.train_on(&workers, job_id, data, split, combo, hp, mode, seed);
        if result.is_ok() {
            record.advance(JobState::Dispatched, s.now_ms()).expect("arbitrating job");
            record.advance(JobState::Completed, s.now_ms()).expect("dispatched job");
        } else {
            record.advance(JobState::Failed, s.now_ms()).expect("live job");
        }
        s.jobs.lock().map_err(poisoned)?.insert(key, record);
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn train_on(
        &self,
        workers: &[(String, String)],
        job_id: u64,
        data: &PreparedData,
        split: &SplitDataset,
        combo: &Combo,
        hp: &Hyperparams,
        mode: VotingMode,
        seed: u64,
    ) -> Result<Ensemble> {
        if workers.is_empty() {
            return Err(NodeError::WorkerTrainingFailure("no healthy workers".into()));
        }
        let k = combo.members.len();
        if split.train_idx.len() < 2 * k {
            return Err(NodeError::WorkerTrainingFailure(format!(
                "{} training rows cannot feed {k} members",
                split.train_idx.len()
            )));
        }
        let shards = ensemble::shard_indices(&split.train_idx, k, seed);
        let (vx, vy) = data.rows(&split.val_idx);
        let calibration_csv = dataset::matrix_to_csv(&vx, &vy);
        let tasks: Vec<TaskDispatch> = combo
            .members
            .iter()
            .zip(&shards)
            .enumerate()
            .map(|(i, (&algorithm, shard))| {
                let (x, y) = data.rows(shard);
                TaskDispatch {
                    job_id,
                    task: Task::Train {
                        algorithm,
                        hyperparams: hp.clone(),
                        seed: ensemble::member_seed(seed, i),
                        train_csv: dataset::matrix_to_csv(&x, &y),
                        calibration_csv: calibration_csv.clone(),
                    },
                }
            })
            .collect();
        let s = &self.shared;
        let results: Vec<Result<TrainedModel>> = thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .into_iter()
                .enumerate()
                .map(|(i, task)| {
                    let (id, address) = &workers[i % workers.len()];
                    scope.spawn(move || {
                        let result = match s.actors.get(id) {
                            Some(actor) => actor.executor.run(task).map_err(|f| NodeError::TaskFailure {
                                job_id: Some(f.job_id),
                                code: f.code,
                                detail: f.detail,
                            }),
                            None => s.train_remote(id, address, task),
                        }?;
                        match result.output {
                            TaskOutput::Model { model } => Ok(model.model),
                            TaskOutput::Predictions { .. } => {
                                Err(NodeError::Unexpected { expected: "model", got: "predictions".into() })
                            }
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        let members = results
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| NodeError::WorkerTrainingFailure(e.to_string()))?;
        Ensemble::new(members, mode, combo.name.clone()).map_err(|e| NodeError::WorkerTrainingFailure(e.to_string()))
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.shared.address);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

/// Binds the master, creates its co-located actors and starts accepting
/// registrations, load reports, job requests and dispatches.
pub fn run_master(cfg: NodeConfig) -> Result<MasterHandle> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.listen_address)
        .map_err(|e| NodeError::BindFailure { address: cfg.listen_address.clone(), reason: e.to_string() })?;
    let address = listener.local_addr()?.to_string();
    let exec_delay = Duration::from_millis(cfg.exec_delay_ms);
    let mut registry = WorkerRegistry::new(cfg.heartbeat_interval_ms);
    let mut actors = BTreeMap::new();
    for i in 0..cfg.local_actors {
        let id = format!("actor{i}");
        let mut sampler = LoadSampler::new(&cfg.load_profile);
        // stagger scripted profiles so co-located actors differ
        for _ in 0..i {
            sampler.sample();
        }
        registry.register(&id, &address, 0, true);
        let ctx = ExecContext::new(&id, cfg.model_dir.as_deref(), exec_delay);
        actors.insert(id, LocalActor { executor: Executor::spawn(ctx), sampler: Mutex::new(sampler) });
    }
    let self_exec = Executor::spawn(ExecContext::new(&cfg.node_id, cfg.model_dir.as_deref(), exec_delay));
    let shared = Arc::new(MasterShared {
        endpoint: Endpoint::new(&cfg),
        address,
        clock: Instant::now(),
        registry: RwLock::new(registry),
        jobs: Mutex::new(HashMap::new()),
        actors,
        self_exec,
        next_job: AtomicU64::new(1),
        stop: AtomicBool::new(false),
        cfg,
    });
    let accept_shared = shared.clone();
    let accept = thread::Builder::new().name("master-accept".into()).spawn(move || {
        for conn in listener.incoming() {
            if accept_shared.stop.load(Ordering::SeqCst) {
                return;
            }
            match conn {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    let s = accept_shared.clone();
                    let _ = thread::Builder::new().name("master-conn".into()).spawn(move || s.serve(stream));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    })?;
    info!("master {} listening on {}", shared.cfg.node_id, shared.address);
    Ok(MasterHandle { shared, accept: Some(accept) })
}
