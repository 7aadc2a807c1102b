//! Deployment scenarios run as separate node processes on loopback, with
//! per-link injected delays, plus timing records and their summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, Dataset};
use crate::ensemble::{Combo, VotingMode};
use crate::models::{self, EvalReport, Prediction};
use crate::node::{Gateway, NodeConfig, NodeError, Role};
use crate::pipeline::{self, PipelineConfig};
use crate::protocol::ModelRef;

pub const TIMING_CSV_HEADER: &str =
    "job_id,scenario,arbitration_ms,latency_ms,execution_ms,response_ms,bytes_sent,bytes_received";
pub const PRESETS: [&str; 3] = ["a_bcd", "a_b", "a_cloud_bcd"];
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("port conflict: {0}")]
    PortConflict(String),
    #[error("node {node_id} crashed: {info}")]
    NodeCrash { node_id: String, info: String },
    #[error("cannot write report: {0}")]
    WriteFailure(String),
    #[error("no records to report")]
    NoRecords,
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Per-job timings. Every interval is taken on a single node's monotonic
/// clock; latency is the residual of the response time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub job_id: u64,
    pub scenario: String,
    pub arbitration_ms: f64,
    pub latency_ms: f64,
    pub execution_ms: f64,
    pub response_ms: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl TimingRecord {
    pub fn new(
        job_id: u64,
        arbitration_ms: f64,
        execution_ms: f64,
        response_ms: f64,
        bytes_sent: u64,
        bytes_received: u64,
    ) -> Self {
        // the three intervals are disjoint spans of the same job, so the
        // residual is non-negative up to clock granularity
        let latency_ms = (response_ms - arbitration_ms - execution_ms).max(0.0);
        TimingRecord {
            job_id,
            scenario: String::new(),
            arbitration_ms,
            latency_ms,
            execution_ms,
            response_ms,
            bytes_sent,
            bytes_received,
        }
    }

    pub fn is_valid(&self) -> bool {
        let times = [self.arbitration_ms, self.latency_ms, self.execution_ms, self.response_ms];
        times.iter().all(|t| t.is_finite() && *t >= 0.0)
            && self.response_ms + 1e-6 >= self.arbitration_ms + self.execution_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Played by the scenario runner itself.
    Gateway,
    Master,
    Worker,
    /// Unregistered worker the master forwards to when cloud is enabled.
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    /// Actors hosted in this process (masters only).
    pub local_actors: usize,
    pub load_profile: Vec<f64>,
}

impl NodeSpec {
    fn new(id: &str, kind: NodeKind, local_actors: usize, load_profile: &[f64]) -> Self {
        NodeSpec { id: id.into(), kind, local_actors, load_profile: load_profile.to_vec() }
    }

    /// Peer ids served by this process.
    fn aliases(&self) -> Vec<String> {
        let mut ids = vec![self.id.clone()];
        ids.extend((0..self.local_actors).map(|i| format!("actor{i}")));
        ids
    }
}

/// One-way delay of `delay_ms * hops`, applied in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub delay_ms: f64,
    pub hops: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub cloud_enabled: bool,
    pub combo: String,
    pub mode: VotingMode,
    pub repetitions: usize,
    pub seed: u64,
    pub rows_per_job: usize,
    pub heavy_load_threshold: f64,
}

/// Loads shared by every edge executor so presets compare like with like.
pub const EDGE_LOAD_PROFILE: [f64; 4] = [0.35, 0.55, 0.45, 0.6];
/// The cloud cluster runs on faster, lightly loaded machines.
pub const CLOUD_LOAD_PROFILE: [f64; 4] = [0.05, 0.1, 0.08, 0.12];

fn link(a: &str, b: &str, delay_ms: f64, hops: u32) -> LinkSpec {
    LinkSpec { a: a.into(), b: b.into(), delay_ms, hops }
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let base = |name: &str, nodes, links| ScenarioConfig {
        name: name.into(),
        nodes,
        links,
        cloud_enabled: false,
        combo: "rf-svm-lr".into(),
        mode: VotingMode::Hard,
        repetitions: 30,
        seed: 7,
        rows_per_job: 20,
        heavy_load_threshold: 0.8,
    };
    let edge = &EDGE_LOAD_PROFILE;
    match name {
        "a_bcd" => {
            let nodes = vec![
                NodeSpec::new("user", NodeKind::Gateway, 0, &[]),
                NodeSpec::new("master", NodeKind::Master, 1, edge),
                NodeSpec::new("actor1", NodeKind::Worker, 0, edge),
                NodeSpec::new("actor2", NodeKind::Worker, 0, edge),
            ];
            let ids = ["user", "master", "actor1", "actor2"];
            let mut links = Vec::new();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    links.push(link(a, b, 5.0, 1));
                }
            }
            Ok(base(name, nodes, links))
        }
        "a_b" => Ok(base(
            name,
            vec![NodeSpec::new("user", NodeKind::Gateway, 0, &[]), NodeSpec::new("master", NodeKind::Master, 3, edge)],
            vec![link("user", "master", 5.0, 1)],
        )),
        "a_cloud_bcd" => {
            let cloud = &CLOUD_LOAD_PROFILE;
            let nodes = vec![
                NodeSpec::new("user", NodeKind::Gateway, 0, &[]),
                NodeSpec::new("master", NodeKind::Master, 1, cloud),
                NodeSpec::new("actor1", NodeKind::Worker, 0, cloud),
                NodeSpec::new("actor2", NodeKind::Worker, 0, cloud),
            ];
            let mut links: Vec<LinkSpec> =
                ["master", "actor1", "actor2"].iter().map(|n| link("user", n, 20.0, 2)).collect();
            links.push(link("master", "actor1", 0.0, 1));
            links.push(link("master", "actor2", 0.0, 1));
            links.push(link("actor1", "actor2", 0.0, 1));
            Ok(base(name, nodes, links))
        }
        other => Err(BenchError::UnknownPreset(other.to_string())),
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidScenario(m));
        let count = |k| self.nodes.iter().filter(|n| n.kind == k).count();
        if count(NodeKind::Gateway) == 0 {
            return bad("at least one gateway is required".into());
        }
        if count(NodeKind::Master) != 1 {
            return bad("exactly one master is required".into());
        }
        let mut ids = BTreeSet::new();
        for alias in self.nodes.iter().flat_map(NodeSpec::aliases) {
            if !ids.insert(alias.clone()) {
                return bad(format!("duplicate node id {alias}"));
            }
        }
        for l in &self.links {
            if !(l.delay_ms.is_finite() && l.delay_ms >= 0.0) {
                return bad(format!("delay on {}-{} must be >= 0", l.a, l.b));
            }
            if !ids.contains(&l.a) || !ids.contains(&l.b) {
                return bad(format!("link {}-{} names an unknown node", l.a, l.b));
            }
        }
        if self.cloud_enabled && count(NodeKind::Cloud) != 1 {
            return bad("cloud_enabled needs exactly one cloud node".into());
        }
        if self.repetitions == 0 || self.rows_per_job == 0 {
            return bad("repetitions and rows_per_job must be >= 1".into());
        }
        Combo::parse(&self.combo).map_err(|e| BenchError::InvalidScenario(e.to_string()))?;
        Ok(())
    }

    pub fn master(&self) -> &NodeSpec {
        self.nodes.iter().find(|n| n.kind == NodeKind::Master).expect("validated")
    }

    /// One-way delay in ms from node `from` to every peer id it may address,
    /// including the actors co-located with that peer.
    pub fn delays_from(&self, from: &str) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for l in &self.links {
            let d = l.delay_ms * f64::from(l.hops);
            let peer = if l.a == from {
                &l.b
            } else if l.b == from {
                &l.a
            } else {
                continue;
            };
            let aliases = self.nodes.iter().find(|n| &n.id == peer).map(NodeSpec::aliases).unwrap_or_default();
            for alias in aliases {
                out.insert(alias, d);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// The `edgevote` binary used for node processes.
    pub exe: PathBuf,
    /// Scratch directory for configs, logs and the model file.
    pub work_dir: PathBuf,
    /// Raw dataset; the model is trained on it and jobs are cut from it.
    pub dataset: Dataset,
    pub startup_timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub scenario: String,
    pub records: Vec<TimingRecord>,
    /// Accuracy of every returned prediction against the dataset labels.
    pub eval: Option<EvalReport>,
    pub completed: usize,
    pub requested: usize,
    /// Set when the run stopped early.
    pub failure: Option<String>,
}

impl ScenarioResult {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.completed == self.requested
    }
}

struct NodeProcess {
    id: String,
    child: Child,
    lines: Receiver<String>,
}

impl NodeProcess {
    fn spawn(exe: &Path, id: &str, args: &[String], log_path: &Path) -> Result<Self> {
        let log = std::fs::File::create(log_path)?;
        let mut child = Command::new(exe).args(args).stdout(Stdio::piped()).stderr(log).spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(|l| l.ok()) {
                if tx.send(line).is_err() {
                    return;
                }
            }
        });
        Ok(NodeProcess { id: id.to_string(), child, lines })
    }

    fn exited(&mut self) -> Option<ExitStatus> {
        self.child.try_wait().ok().flatten()
    }

    fn crash_info(&mut self, log_path: &Path) -> String {
        let status = self.exited().map_or("still running".to_string(), |s| s.to_string());
        let tail = std::fs::read_to_string(log_path).unwrap_or_default();
        let tail: Vec<&str> = tail.lines().rev().take(5).collect();
        format!("{status}; {}", tail.into_iter().rev().collect::<Vec<_>>().join(" | "))
    }

    /// Waits for a stdout line starting with `prefix`; returns the rest.
    fn expect(&mut self, prefix: &str, timeout: Duration, log_path: &Path) -> Result<String> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left.max(Duration::from_millis(1))) {
                Ok(line) => {
                    if let Some(rest) = line.strip_prefix(prefix) {
                        return Ok(rest.trim().to_string());
                    }
                }
                Err(_) => {
                    let info = self.crash_info(log_path);
                    if info.contains("in use") {
                        return Err(BenchError::PortConflict(info));
                    }
                    return Err(BenchError::NodeCrash {
                        node_id: self.id.clone(),
                        info: format!("no {prefix:?} line: {info}"),
                    });
                }
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Kills every child on drop, so early returns never leak processes.
struct Cluster {
    procs: Vec<(NodeProcess, PathBuf)>,
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for (p, _) in &mut self.procs {
            p.kill();
        }
    }
}

const SHARED_SECRET: &str = "edgevote-bench";

fn node_config(cfg: &ScenarioConfig, spec: &NodeSpec, role: Role, model_dir: &Path) -> NodeConfig {
    NodeConfig {
        role,
        node_id: spec.id.clone(),
        master_id: cfg.master().id.clone(),
        heavy_load_threshold: cfg.heavy_load_threshold,
        shared_secret: SHARED_SECRET.into(),
        injected_hop_delay_ms: cfg.delays_from(&spec.id),
        local_actors: spec.local_actors,
        load_profile: spec.load_profile.clone(),
        model_dir: Some(model_dir.to_path_buf()),
        ..NodeConfig::default()
    }
}

fn launch(
    cluster: &mut Cluster,
    opts: &RunOptions,
    spec: &NodeSpec,
    cfg: &NodeConfig,
    extra: &[String],
) -> Result<String> {
    let cfg_path = opts.work_dir.join(format!("{}.json", spec.id));
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let log_path = opts.work_dir.join(format!("{}.log", spec.id));
    let sub = match cfg.role {
        Role::Master => "master",
        _ => "worker",
    };
    let mut args = vec![sub.to_string(), "--config".into(), cfg_path.display().to_string()];
    args.extend_from_slice(extra);
    let mut proc = NodeProcess::spawn(&opts.exe, &spec.id, &args, &log_path)?;
    let addr = proc.expect("LISTENING ", opts.startup_timeout, &log_path);
    cluster.procs.push((proc, log_path));
    addr
}

/// Jobs cut from the filtered dataset, wrapping around at the end.
fn job_slices(ds: &Dataset, reps: usize, rows: usize) -> Vec<Dataset> {
    let n = ds.len();
    (0..reps)
        .map(|r| {
            let records = (0..rows).map(|i| ds.records[(r * rows + i) % n].clone()).collect();
            Dataset::from_records(records)
        })
        .collect()
}

pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ScenarioResult> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.work_dir)?;
    let model_dir = opts.work_dir.join("models");
    std::fs::create_dir_all(&model_dir)?;

    let mut pcfg = PipelineConfig::new(Combo::parse(&cfg.combo).expect("validated"), cfg.seed);
    pcfg.mode = cfg.mode;
    let bundle = pipeline::run(&opts.dataset, &pcfg)?;
    bundle.save(model_dir.join(MODEL_FILE))?;

    let mut cluster = Cluster { procs: Vec::new() };
    let cloud_address = match cfg.nodes.iter().find(|n| n.kind == NodeKind::Cloud) {
        Some(spec) => {
            let mut c = node_config(cfg, spec, Role::Worker, &model_dir);
            c.register = false;
            Some(launch(&mut cluster, opts, spec, &c, &[])?)
        }
        None => None,
    };
    let master_spec = cfg.master();
    let mut mcfg = node_config(cfg, master_spec, Role::Master, &model_dir);
    mcfg.cloud_enabled = cfg.cloud_enabled;
    mcfg.cloud_address = cloud_address;
    if let Some(cloud) = cfg.nodes.iter().find(|n| n.kind == NodeKind::Cloud) {
        mcfg.cloud_id = cloud.id.clone();
    }
    let workers: Vec<&NodeSpec> = cfg.nodes.iter().filter(|n| n.kind == NodeKind::Worker).collect();
    let extra = vec!["--expect-workers".to_string(), workers.len().to_string()];
    let master_address = launch(&mut cluster, opts, master_spec, &mcfg, &extra)?;
    for spec in &workers {
        let mut c = node_config(cfg, spec, Role::Worker, &model_dir);
        c.master_address = Some(master_address.clone());
        launch(&mut cluster, opts, spec, &c, &[])?;
    }
    {
        let (master_proc, log) = &mut cluster.procs.iter_mut().find(|(p, _)| p.id == master_spec.id).expect("launched");
        master_proc.expect("READY", opts.startup_timeout, log)?;
    }
    info!("scenario {}: {} node processes up", cfg.name, cluster.procs.len());

    let gateways: Vec<Gateway> = cfg
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Gateway)
        .map(|spec| {
            let mut c = node_config(cfg, spec, Role::Gateway, &model_dir);
            c.master_address = Some(master_address.clone());
            Gateway::new(c)
        })
        .collect::<std::result::Result<_, _>>()?;

    let jobs_ds = dataset::drop_missing_default(&opts.dataset);
    let jobs = job_slices(&jobs_ds, cfg.repetitions, cfg.rows_per_job);
    let mut records = Vec::new();
    let mut predictions: Vec<Prediction> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut failure = None;
    for (rep, job) in jobs.iter().enumerate() {
        let gw = &gateways[rep % gateways.len()];
        let model = ModelRef::Named { name: MODEL_FILE.into() };
        match gw.submit_job(rep as u64 + 1, &job.to_csv_string(), model) {
            Ok(outcome) => {
                let mut t = outcome.timing;
                t.scenario = cfg.name.clone();
                records.push(t);
                predictions.extend(outcome.predictions);
                labels.extend(job.labels());
            }
            Err(e) => {
                let crashed = cluster.procs.iter_mut().find_map(|(p, log)| {
                    p.exited().map(|_| BenchError::NodeCrash { node_id: p.id.clone(), info: p.crash_info(log) })
                });
                let err = crashed.unwrap_or(BenchError::Node(e));
                warn!("scenario {} stopped at job {}: {err}", cfg.name, rep + 1);
                failure = Some(err.to_string());
                break;
            }
        }
    }
    drop(cluster);
    let eval = if predictions.is_empty() { None } else { models::evaluate(&predictions, &labels).ok() };
    Ok(ScenarioResult {
        scenario: cfg.name.clone(),
        completed: records.len(),
        requested: cfg.repetitions,
        records,
        eval,
        failure,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Stats {
    /// Median averages the middle pair; p95 is the nearest-rank value.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Stats { mean: v.iter().sum::<f64>() / n as f64, median, p95: v[rank - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub jobs: usize,
    pub arbitration_ms: Stats,
    pub latency_ms: Stats,
    pub execution_ms: Stats,
    pub response_ms: Stats,
    pub bytes_sent: Stats,
    pub bytes_received: Stats,
}

pub fn summarize(records: &[TimingRecord]) -> Vec<Summary> {
    let mut by_scenario: BTreeMap<&str, Vec<&TimingRecord>> = BTreeMap::new();
    for r in records {
        by_scenario.entry(&r.scenario).or_default().push(r);
    }
    by_scenario
        .into_iter()
        .map(|(scenario, rs)| {
            let stat = |f: fn(&TimingRecord) -> f64| {
                Stats::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("non-empty group")
            };
            Summary {
                scenario: scenario.to_string(),
                jobs: rs.len(),
                arbitration_ms: stat(|r| r.arbitration_ms),
                latency_ms: stat(|r| r.latency_ms),
                execution_ms: stat(|r| r.execution_ms),
                response_ms: stat(|r| r.response_ms),
                bytes_sent: stat(|r| r.bytes_sent as f64),
                bytes_received: stat(|r| r.bytes_received as f64),
            }
        })
        .collect()
}

pub fn format_summary(summaries: &[Summary]) -> String {
    let mut out = format!(
        "{:<14} {:>5} {:<15} {:>10} {:>10} {:>10}\n",
        "scenario", "jobs", "metric", "mean", "median", "p95"
    );
    for s in summaries {
        let rows = [
            ("arbitration_ms", s.arbitration_ms),
            ("latency_ms", s.latency_ms),
            ("execution_ms", s.execution_ms),
            ("response_ms", s.response_ms),
            ("bytes_sent", s.bytes_sent),
            ("bytes_received", s.bytes_received),
        ];
        for (i, (metric, st)) in rows.iter().enumerate() {
            let (name, jobs) = if i == 0 { (s.scenario.as_str(), s.jobs.to_string()) } else { ("", String::new()) };
            let _ = writeln!(
                out,
                "{name:<14} {jobs:>5} {metric:<15} {:>10.3} {:>10.3} {:>10.3}",
                st.mean, st.median, st.p95
            );
        }
    }
    out
}

pub fn write_records_csv(records: &[TimingRecord], path: &Path) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| BenchError::WriteFailure(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
    for r in records {
        w.serialize(r).map_err(|e| fail(&e))?;
    }
    w.flush().map_err(|e| fail(&e))?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<TimingRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| BenchError::Io(std::io::Error::other(e)))
}

/// Writes `timings.csv` and `summary.json` into `dir` and returns the
/// per-scenario summaries.
pub fn report(records: &[TimingRecord], dir: &Path) -> Result<Vec<Summary>> {
    if records.is_empty() {
        return Err(BenchError::NoRecords);
    }
    std::fs::create_dir_all(dir).map_err(|e| BenchError::WriteFailure(e.to_string()))?;
    write_records_csv(records, &dir.join("timings.csv"))?;
    let summaries = summarize(records);
    let json = serde_json::to_string_pretty(&summaries).expect("summaries serialize");
    std::fs::write(dir.join("summary.json"), json).map_err(|e| BenchError::WriteFailure(e.to_string()))?;
    Ok(summaries)
}
