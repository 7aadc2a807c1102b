use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::protocol::{ErrorBody, LoadReport, Payload, ProtocolError, RegisterWorker};

use super::config::NodeConfig;
use super::executor::{ExecContext, Executor};
use super::load::LoadSampler;
use super::net::{self, Endpoint};
use super::{NodeError, Result};

const BACKOFF_BASE: Duration = Duration::from_millis(50);
const REGISTER_ACK_TIMEOUT: Duration = Duration::from_secs(2);

struct WorkerShared {
    cfg: NodeConfig,
    endpoint: Endpoint,
    address: String,
    executor: Executor,
    sampler: Mutex<LoadSampler>,
    clock: Instant,
    stop: AtomicBool,
    /// Registration connection, kept so shutdown can close it.
    master_conn: Mutex<Option<TcpStream>>,
}

impl WorkerShared {
    fn load_report(&self) -> LoadReport {
        let (cpu_load, mem_load) = self.sampler.lock().expect("sampler lock").sample();
        LoadReport {
            cpu_load,
            mem_load,
            queue_length: self.executor.queue_length(),
            taken_at: self.clock.elapsed().as_millis() as u64,
        }
    }

    fn master_id(&self) -> &str {
        &self.cfg.master_id
    }

    fn register_once(&self) -> Result<TcpStream> {
        let mut conn = net::connect(self.cfg.master_address()?, Duration::from_secs(2))?;
        let reg = RegisterWorker { worker_id: self.cfg.node_id.clone(), address: self.address.clone() };
        self.endpoint.send(&mut conn, self.master_id(), Payload::RegisterWorker(reg))?;
        conn.set_read_timeout(Some(REGISTER_ACK_TIMEOUT))?;
        let (ack, _) = self.endpoint.recv(&mut conn)?;
        match ack.payload {
            Payload::Heartbeat => {}
            Payload::Error(e) => {
                return Err(NodeError::TaskFailure { job_id: None, code: e.code, detail: e.detail });
            }
            other => return Err(NodeError::Unexpected { expected: "heartbeat", got: other.msg_type().to_string() }),
        }
        conn.set_read_timeout(None)?;
        self.endpoint.send(&mut conn, self.master_id(), Payload::LoadReport(self.load_report()))?;
        Ok(conn)
    }

    /// Exponential backoff starting at 50 ms, `max_connect_attempts` tries.
    fn register_with_retry(&self) -> Result<TcpStream> {
        let attempts = self.cfg.max_connect_attempts;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
            }
            match self.register_once() {
                Ok(conn) => {
                    info!("{} registered with master at {}", self.cfg.node_id, self.cfg.master_address()?);
                    return Ok(conn);
                }
                Err(e) => {
                    debug!("registration attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(NodeError::MasterUnreachable { attempts, last })
    }
}

pub struct WorkerHandle {
    pub id: String,
    pub address: String,
    shared: Arc<WorkerShared>,
    threads: Vec<JoinHandle<()>>,
}

impl WorkerHandle {
    pub fn is_running(&self) -> bool {
        !self.shared.stop.load(Ordering::SeqCst)
    }

    /// Blocks until the worker stops (it only stops via [`shutdown`](Self::shutdown)
    /// or losing the master for good).
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        stop(&self.shared);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.executor.shutdown();
    }
}

fn stop(shared: &WorkerShared) {
    if shared.stop.swap(true, Ordering::SeqCst) {
        return;
    }
    if let Some(conn) = shared.master_conn.lock().expect("conn lock").take() {
        let _ = conn.shutdown(Shutdown::Both);
    }
    // wake the accept loop
    let _ = TcpStream::connect(&shared.address);
}

/// Binds, registers with the master (unless `register` is off) and starts
/// serving load queries and task dispatches.
pub fn run_worker(cfg: NodeConfig) -> Result<WorkerHandle> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.listen_address)
        .map_err(|e| NodeError::BindFailure { address: cfg.listen_address.clone(), reason: e.to_string() })?;
    let address = listener.local_addr()?.to_string();
    let ctx = ExecContext::new(&cfg.node_id, cfg.model_dir.as_deref(), Duration::from_millis(cfg.exec_delay_ms));
    let shared = Arc::new(WorkerShared {
        endpoint: Endpoint::new(&cfg),
        address: address.clone(),
        executor: Executor::spawn(ctx),
        sampler: Mutex::new(LoadSampler::new(&cfg.load_profile)),
        clock: Instant::now(),
        stop: AtomicBool::new(false),
        master_conn: Mutex::new(None),
        cfg,
    });

    let accept_shared = shared.clone();
    let mut threads = vec![thread::Builder::new()
        .name(format!("accept-{}", shared.cfg.node_id))
        .spawn(move || accept_loop(listener, accept_shared))?];

    if shared.cfg.register {
        let conn = match shared.register_with_retry() {
            Ok(c) => c,
            Err(e) => {
                stop(&shared);
                for t in threads {
                    let _ = t.join();
                }
                return Err(e);
            }
        };
        *shared.master_conn.lock().expect("conn lock") = Some(conn.try_clone()?);
        let reporter_shared = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("report-{}", shared.cfg.node_id))
                .spawn(move || report_loop(conn, reporter_shared))?,
        );
    }
    Ok(WorkerHandle { id: shared.cfg.node_id.clone(), address, shared, threads })
}

fn sleep_unless_stopped(shared: &WorkerShared, total: Duration) {
    let deadline = Instant::now() + total;
    while !shared.stop.load(Ordering::SeqCst) {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return;
        }
        thread::sleep(left.min(Duration::from_millis(20)));
    }
}

fn report_loop(mut conn: TcpStream, shared: Arc<WorkerShared>) {
    loop {
        sleep_unless_stopped(&shared, shared.cfg.heartbeat_interval());
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        let report = Payload::LoadReport(shared.load_report());
        if let Err(e) = shared.endpoint.send(&mut conn, shared.master_id(), report) {
            if shared.stop.load(Ordering::SeqCst) {
                return;
            }
            warn!("{}: lost master connection ({e}), re-registering", shared.cfg.node_id);
            match shared.register_with_retry() {
                Ok(c) => {
                    if let Ok(clone) = c.try_clone() {
                        *shared.master_conn.lock().expect("conn lock") = Some(clone);
                    }
                    conn = c;
                }
                Err(e) => {
                    warn!("{}: {e}; stopping", shared.cfg.node_id);
                    stop(&shared);
                    return;
                }
            }
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<WorkerShared>) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        match conn {
            Ok(stream) => {
                let _ = stream.set_nodelay(true);
                let s = shared.clone();
                let _ = thread::Builder::new().name("worker-conn".into()).spawn(move || serve(stream, s));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

fn serve(mut stream: TcpStream, shared: Arc<WorkerShared>) {
    loop {
        let msg = match shared.endpoint.recv(&mut stream) {
            Ok((m, _)) => m,
            Err(ProtocolError::Closed) => return,
            Err(e) => {
                debug!("{}: dropping connection: {e}", shared.cfg.node_id);
                return;
            }
        };
        let peer = msg.sender_id.clone();
        let reply = match msg.payload {
            Payload::LoadQuery => Payload::LoadReport(shared.load_report()),
            Payload::Heartbeat => Payload::Heartbeat,
            Payload::TaskDispatch(d) => match shared.executor.run(d) {
                Ok(result) => Payload::TaskResult(result),
                Err(f) => Payload::Error(f.to_body()),
            },
            other => Payload::Error(ErrorBody {
                job_id: None,
                code: "unexpected".into(),
                detail: format!("workers do not handle {}", other.msg_type()),
            }),
        };
        if let Err(e) = shared.endpoint.send(&mut stream, &peer, reply) {
            debug!("{}: reply to {peer} failed: {e}", shared.cfg.node_id);
            return;
        }
    }
}
