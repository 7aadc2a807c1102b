use std::io::{BufRead, BufReader};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use edgevote::dataset::{self, Dataset};
use edgevote::ensemble::{self, Combo, VotingMode};
use edgevote::node::{self, Endpoint, Gateway, JobState, MasterHandle, NodeConfig, NodeError, Role, WorkerHandle};
use edgevote::pipeline::{self, ModelBundle, PipelineConfig};
use edgevote::protocol::{ModelRef, Payload, PlacementDecision, PlacementResponse, TaskOutput, TaskResult};

fn raw() -> Dataset {
    dataset::load_csv(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/pima-indians-diabetes.csv")).unwrap()
}

/// Trains a small bundle into `dir/model.json`.
fn model_in(dir: &Path) -> ModelBundle {
    let cfg = PipelineConfig::new(Combo::parse("svm-dt-lr").unwrap(), 5);
    let b = pipeline::run(&raw(), &cfg).unwrap();
    b.save(dir.join("model.json")).unwrap();
    b
}

fn job_csv(rows: usize, offset: usize) -> String {
    let ds = dataset::drop_missing_default(&raw());
    let records = (0..rows).map(|i| ds.records[(offset + i) % ds.len()].clone()).collect();
    Dataset::from_records(records).to_csv_string()
}

fn named() -> ModelRef {
    ModelRef::Named { name: "model.json".into() }
}

fn master(dir: &Path, tweak: impl FnOnce(&mut NodeConfig)) -> MasterHandle {
    let mut cfg = NodeConfig::for_role(Role::Master, "master");
    cfg.heartbeat_interval_ms = 100;
    cfg.model_dir = Some(dir.to_path_buf());
    tweak(&mut cfg);
    node::run_master(cfg).unwrap()
}

fn worker(m: &MasterHandle, id: &str, dir: &Path, tweak: impl FnOnce(&mut NodeConfig)) -> WorkerHandle {
    let mut cfg = NodeConfig::for_role(Role::Worker, id);
    cfg.master_address = Some(m.address().to_string());
    cfg.heartbeat_interval_ms = 100;
    cfg.model_dir = Some(dir.to_path_buf());
    tweak(&mut cfg);
    node::run_worker(cfg).unwrap()
}

fn gateway(address: &str, tweak: impl FnOnce(&mut NodeConfig)) -> Gateway {
    let mut cfg = NodeConfig::for_role(Role::Gateway, "user");
    cfg.master_address = Some(address.to_string());
    tweak(&mut cfg);
    Gateway::new(cfg).unwrap()
}

#[test]
fn one_worker_matches_local_inference() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = model_in(dir.path());
    let m = master(dir.path(), |_| {});
    let w = worker(&m, "w1", dir.path(), |c| c.load_profile = vec![0.3]);
    assert!(m.wait_for_workers(1, Duration::from_secs(5)));
    let csv = job_csv(5, 0);
    let out = gateway(m.address(), |_| {}).submit_job(1, &csv, named()).unwrap();
    let (_, local) = bundle.predict_csv(&csv).unwrap();
    assert_eq!(out.predictions, local);
    assert_eq!(out.worker_id, "w1");
    assert_eq!(out.placement.decision, PlacementDecision::Worker);
    assert!(out.timing.is_valid());
    assert!(out.timing.bytes_sent > csv.len() as u64);

    let jobs = m.jobs();
    assert_eq!(jobs.len(), 1);
    // the result goes straight to the gateway, so the master's record
    // ends at Dispatched
    let states: Vec<JobState> = jobs[0].transitions.iter().map(|t| t.0).collect();
    assert_eq!(states, [JobState::Received, JobState::Arbitrating, JobState::Dispatched]);
    w.shutdown();
    m.shutdown();
}

#[test]
fn least_loaded_worker_gets_the_job() {
    let dir = tempfile::tempdir().unwrap();
    model_in(dir.path());
    let m = master(dir.path(), |_| {});
    let ws: Vec<_> = [("w1", 0.6), ("w2", 0.2), ("w3", 0.4)]
        .iter()
        .map(|(id, load)| worker(&m, id, dir.path(), |c| c.load_profile = vec![*load]))
        .collect();
    assert!(m.wait_for_workers(3, Duration::from_secs(5)));
    let out = gateway(m.address(), |_| {}).submit_job(1, &job_csv(3, 0), named()).unwrap();
    assert_eq!((out.placement.target_id.as_str(), out.worker_id.as_str()), ("w2", "w2"));
    for w in ws {
        w.shutdown();
    }
    m.shutdown();
}

#[test]
fn inline_model_without_a_model_dir() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = model_in(dir.path());
    let m = node::run_master(NodeConfig::for_role(Role::Master, "master")).unwrap();
    let csv = job_csv(4, 10);
    let out = gateway(m.address(), |_| {})
        .submit_job(9, &csv, ModelRef::Inline { bundle: Box::new(bundle.clone()) })
        .unwrap();
    // no workers at all: the master runs the job itself
    assert_eq!(out.placement.decision, PlacementDecision::BrokerSelf);
    assert_eq!(out.worker_id, "master");
    assert_eq!(out.predictions, bundle.predict_csv(&csv).unwrap().1);
    let states: Vec<JobState> = m.jobs()[0].transitions.iter().map(|t| t.0).collect();
    assert_eq!(
        states,
        [JobState::Received, JobState::Arbitrating, JobState::Dispatched, JobState::Completed]
    );
    m.shutdown();
}

#[test]
fn loaded_workers_fall_back_to_the_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = model_in(dir.path());
    let mut ccfg = NodeConfig::for_role(Role::Worker, "cloud");
    ccfg.register = false;
    ccfg.model_dir = Some(dir.path().to_path_buf());
    let cloud = node::run_worker(ccfg).unwrap();
    let m = master(dir.path(), |c| {
        c.cloud_enabled = true;
        c.cloud_address = Some(cloud.address.clone());
    });
    let w = worker(&m, "w1", dir.path(), |c| c.load_profile = vec![0.95]);
    assert!(m.wait_for_workers(1, Duration::from_secs(5)));
    let csv = job_csv(6, 3);
    let out = gateway(m.address(), |_| {}).submit_job(2, &csv, named()).unwrap();
    assert_eq!(out.placement.decision, PlacementDecision::Cloud);
    assert!(out.placement.via_cloud);
    assert_eq!(out.worker_id, "cloud");
    assert_eq!(out.predictions, bundle.predict_csv(&csv).unwrap().1);
    w.shutdown();
    cloud.shutdown();
    m.shutdown();
}

#[test]
fn stopped_worker_turns_unhealthy() {
    let dir = tempfile::tempdir().unwrap();
    let m = master(dir.path(), |_| {});
    let w = worker(&m, "w1", dir.path(), |c| c.load_profile = vec![0.1]);
    assert!(m.wait_for_workers(1, Duration::from_secs(5)));
    assert!(m.snapshot().workers.iter().any(|v| v.id == "w1" && v.healthy));
    w.shutdown();
    // three missed 100 ms heartbeats plus slack
    thread::sleep(Duration::from_millis(500));
    assert!(m.snapshot().workers.iter().any(|v| v.id == "w1" && !v.healthy));
    assert_eq!(m.remote_workers(), 0);
    m.shutdown();
}

#[test]
fn wrong_secret_cannot_register() {
    let dir = tempfile::tempdir().unwrap();
    let m = master(dir.path(), |_| {});
    let mut cfg = NodeConfig::for_role(Role::Worker, "intruder");
    cfg.master_address = Some(m.address().to_string());
    cfg.shared_secret = "not-the-secret".into();
    cfg.max_connect_attempts = 2;
    let err = node::run_worker(cfg).err().expect("registration must fail");
    assert!(matches!(err, NodeError::MasterUnreachable { attempts: 2, .. }), "{err}");
    assert_eq!(m.remote_workers(), 0);
    m.shutdown();
}

#[test]
fn slow_worker_hits_the_dispatch_timeout() {
    let dir = tempfile::tempdir().unwrap();
    model_in(dir.path());
    let m = master(dir.path(), |_| {});
    let w = worker(&m, "slow", dir.path(), |c| {
        c.load_profile = vec![0.1];
        c.exec_delay_ms = 2_000;
    });
    assert!(m.wait_for_workers(1, Duration::from_secs(5)));
    let gw = gateway(m.address(), |c| c.dispatch_timeout_ms = 300);
    let start = Instant::now();
    let err = gw.submit_job(1, &job_csv(2, 0), named()).unwrap_err();
    assert!(matches!(err, NodeError::DispatchTimeout { .. }), "{err}");
    assert!(start.elapsed() < Duration::from_millis(1_500));
    w.shutdown();
    m.shutdown();
}

#[test]
fn killed_worker_process_surfaces_dispatch_timeout() {
    let dir = tempfile::tempdir().unwrap();
    model_in(dir.path());
    let m = master(dir.path(), |_| {});
    let mut cfg = NodeConfig::for_role(Role::Worker, "doomed");
    cfg.master_address = Some(m.address().to_string());
    cfg.model_dir = Some(dir.path().to_path_buf());
    cfg.load_profile = vec![0.1];
    cfg.exec_delay_ms = 5_000;
    let cfg_path = dir.path().join("doomed.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_edgevote"))
        .args(["worker", "--config"])
        .arg(&cfg_path)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("LISTENING "), "{line}");
    assert!(m.wait_for_workers(1, Duration::from_secs(5)));

    let address = m.address().to_string();
    let job = thread::spawn(move || {
        let start = Instant::now();
        let r = gateway(&address, |_| {}).submit_job(1, &job_csv(2, 0), named());
        (r, start.elapsed())
    });
    thread::sleep(Duration::from_millis(300));
    child.kill().unwrap();
    child.wait().unwrap();
    let (result, waited) = job.join().unwrap();
    let err = result.unwrap_err();
    assert!(matches!(err, NodeError::DispatchTimeout { .. }), "{err}");
    assert!(waited < Duration::from_secs(12));
    m.shutdown();
}

#[test]
fn unreachable_and_silent_masters() {
    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = closed.local_addr().unwrap().to_string();
    drop(closed);
    let err = gateway(&address, |_| {}).submit_job(1, &job_csv(1, 0), named()).unwrap_err();
    assert!(matches!(err, NodeError::MasterUnreachable { .. }), "{err}");

    // accepts but never answers
    let silent = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = silent.local_addr().unwrap().to_string();
    let hold = thread::spawn(move || silent.accept().map(|(s, _)| s));
    let err = gateway(&address, |c| c.placement_timeout_ms = 200).submit_job(1, &job_csv(1, 0), named()).unwrap_err();
    assert!(matches!(err, NodeError::PlacementTimeout(_)), "{err}");
    drop(hold.join());
}

#[test]
fn bad_csv_is_rejected_before_contacting_the_master() {
    let err = gateway("127.0.0.1:1", |_| {}).submit_job(1, "a,b\n1,2\n", named()).unwrap_err();
    assert!(matches!(err, NodeError::InvalidInput(_)), "{err}");
}

/// Answers one placement with itself as the target, then returns a result
/// carrying `rows` predictions.
fn fake_master(rows: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = listener.local_addr().unwrap().to_string();
    let me = address.clone();
    thread::spawn(move || {
        let ep = Endpoint::new(&NodeConfig::for_role(Role::Master, "master"));
        let serve = |mut s: TcpStream| {
            let (msg, _) = ep.recv(&mut s).unwrap();
            let reply = match msg.payload {
                Payload::JobRequest(r) => Payload::PlacementResponse(PlacementResponse {
                    job_id: r.job_id,
                    decision: PlacementDecision::BrokerSelf,
                    target_id: "master".into(),
                    target_address: me.clone(),
                    via_cloud: false,
                    arbitration_ms: 0.1,
                }),
                Payload::TaskDispatch(d) => Payload::TaskResult(TaskResult {
                    job_id: d.job_id,
                    worker_id: "master".into(),
                    execution_ms: 0.1,
                    output: TaskOutput::Predictions {
                        rows: vec![edgevote::models::Prediction::from_positive(0.2); rows],
                    },
                }),
                other => panic!("unexpected {}", other.msg_type()),
            };
            ep.send(&mut s, "user", reply).unwrap();
        };
        for _ in 0..2 {
            let (s, _) = listener.accept().unwrap();
            serve(s);
        }
    });
    address
}

#[test]
fn short_result_is_a_mismatch() {
    let address = fake_master(1);
    let err = gateway(&address, |_| {}).submit_job(4, &job_csv(3, 0), named()).unwrap_err();
    assert!(matches!(err, NodeError::ResultMismatch { expected: 3, got: 1 }), "{err}");
}

#[test]
fn distributed_training_is_byte_identical_to_local() {
    let dir = tempfile::tempdir().unwrap();
    let m = master(dir.path(), |_| {});
    let ws: Vec<_> = ["w1", "w2"]
        .iter()
        .map(|id| worker(&m, id, dir.path(), |c| c.load_profile = vec![0.2]))
        .collect();
    assert!(m.wait_for_workers(2, Duration::from_secs(5)));
    for combo in Combo::PRESETS {
        let cfg = PipelineConfig::new(Combo::parse(combo).unwrap(), 21);
        let p = pipeline::prepare(&raw(), &cfg).unwrap();
        let local = ensemble::train_sharded(&cfg.combo, &p.data, &p.split, &cfg.hp, VotingMode::Soft, 21).unwrap();
        let remote = m.distribute_training(&p.data, &p.split, &cfg.combo, &cfg.hp, VotingMode::Soft, 21).unwrap();
        assert_eq!(remote.to_json().unwrap(), local.to_json().unwrap(), "{combo}");
    }
    assert!(m.jobs().iter().all(|j| j.state == JobState::Completed));
    for w in ws {
        w.shutdown();
    }
    m.shutdown();
}

#[test]
fn distributed_training_without_workers_fails() {
    let m = node::run_master(NodeConfig::for_role(Role::Master, "master")).unwrap();
    let cfg = PipelineConfig::new(Combo::parse("svm-dt-lr").unwrap(), 1);
    let p = pipeline::prepare(&raw(), &cfg).unwrap();
    let err = m.distribute_training(&p.data, &p.split, &cfg.combo, &cfg.hp, VotingMode::Hard, 1).unwrap_err();
    assert!(matches!(err, NodeError::WorkerTrainingFailure(_)), "{err}");
    assert_eq!(m.jobs()[0].state, JobState::Failed);
    m.shutdown();
}

#[test]
fn co_located_actors_train_and_serve() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = model_in(dir.path());
    let m = master(dir.path(), |c| {
        c.local_actors = 2;
        c.load_profile = vec![0.3, 0.5];
    });
    let csv = job_csv(5, 20);
    let out = gateway(m.address(), |_| {}).submit_job(1, &csv, named()).unwrap();
    assert!(out.worker_id.starts_with("actor"), "{}", out.worker_id);
    assert_eq!(out.predictions, bundle.predict_csv(&csv).unwrap().1);

    let cfg = PipelineConfig::new(Combo::parse("rf-svm-lr").unwrap(), 4);
    let p = pipeline::prepare(&raw(), &cfg).unwrap();
    let local = ensemble::train_sharded(&cfg.combo, &p.data, &p.split, &cfg.hp, VotingMode::Hard, 4).unwrap();
    let here = m.distribute_training(&p.data, &p.split, &cfg.combo, &cfg.hp, VotingMode::Hard, 4).unwrap();
    assert_eq!(here.to_json().unwrap(), local.to_json().unwrap());
    m.shutdown();
}
