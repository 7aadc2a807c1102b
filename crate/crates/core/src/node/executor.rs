use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::dataset;
use crate::ensemble;
use crate::models::{ModelDocument, MODEL_FORMAT_VERSION};
use crate::pipeline::ModelBundle;
use crate::protocol::{ErrorBody, ModelRef, Task, TaskDispatch, TaskOutput, TaskResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFailure {
    pub job_id: u64,
    pub code: String,
    pub detail: String,
}

impl TaskFailure {
    fn new(job_id: u64, code: &str, detail: impl ToString) -> Self {
        TaskFailure { job_id, code: code.to_string(), detail: detail.to_string() }
    }

    pub fn to_body(&self) -> ErrorBody {
        ErrorBody { job_id: Some(self.job_id), code: self.code.clone(), detail: self.detail.clone() }
    }
}

/// Per-executor state: identity, model directory and a bundle cache.
#[derive(Debug)]
pub struct ExecContext {
    pub worker_id: String,
    pub model_dir: Option<PathBuf>,
    pub exec_delay: Duration,
    cache: HashMap<String, Arc<ModelBundle>>,
}

impl ExecContext {
    pub fn new(worker_id: impl Into<String>, model_dir: Option<&Path>, exec_delay: Duration) -> Self {
        ExecContext {
            worker_id: worker_id.into(),
            model_dir: model_dir.map(Path::to_path_buf),
            exec_delay,
            cache: HashMap::new(),
        }
    }

    fn resolve(&mut self, job_id: u64, model: &ModelRef) -> Result<Arc<ModelBundle>, TaskFailure> {
        match model {
            ModelRef::Inline { bundle } => Ok(Arc::new((**bundle).clone())),
            ModelRef::Named { name } => {
                if let Some(b) = self.cache.get(name) {
                    return Ok(b.clone());
                }
                if name.contains(['/', '\\']) || name.starts_with('.') {
                    return Err(TaskFailure::new(job_id, "bad_model_name", name));
                }
                let dir = self
                    .model_dir
                    .as_ref()
                    .ok_or_else(|| TaskFailure::new(job_id, "no_model_dir", "executor has no model directory"))?;
                let b = Arc::new(
                    ModelBundle::load(dir.join(name)).map_err(|e| TaskFailure::new(job_id, "model_load", e))?,
                );
                self.cache.insert(name.clone(), b.clone());
                Ok(b)
            }
        }
    }
}

/// Runs one task and measures its compute time (CSV parsing, scaling and
/// inference, or training).
pub fn execute(ctx: &mut ExecContext, d: &TaskDispatch) -> Result<TaskResult, TaskFailure> {
    let job_id = d.job_id;
    match &d.task {
        Task::Predict { model, csv } => {
            let bundle = ctx.resolve(job_id, model)?;
            let start = Instant::now();
            let (_, rows) = bundle.predict_csv(csv).map_err(|e| TaskFailure::new(job_id, "predict", e))?;
            finish(ctx, job_id, start, TaskOutput::Predictions { rows })
        }
        Task::Train { algorithm, hyperparams, seed, train_csv, calibration_csv } => {
            let start = Instant::now();
            let bad_data = |e| TaskFailure::new(job_id, "bad_training_data", e);
            let (x, y) = dataset::parse_matrix_csv(train_csv).map_err(bad_data)?;
            let (cx, cy) = dataset::parse_matrix_csv(calibration_csv).map_err(bad_data)?;
            let model = ensemble::train_member(*algorithm, (&x, &y), (&cx, &cy), hyperparams, *seed)
                .map_err(|e| TaskFailure::new(job_id, "training", e))?;
            let doc = ModelDocument { version: MODEL_FORMAT_VERSION, model };
            finish(ctx, job_id, start, TaskOutput::Model { model: doc })
        }
    }
}

fn finish(ctx: &ExecContext, job_id: u64, start: Instant, output: TaskOutput) -> Result<TaskResult, TaskFailure> {
    if !ctx.exec_delay.is_zero() {
        thread::sleep(ctx.exec_delay);
    }
    Ok(TaskResult {
        job_id,
        worker_id: ctx.worker_id.clone(),
        execution_ms: start.elapsed().as_secs_f64() * 1000.0,
        output,
    })
}

type Reply = Sender<Result<TaskResult, TaskFailure>>;

/// Single-threaded FIFO executor.
#[derive(Debug)]
pub struct Executor {
    tx: Mutex<Option<Sender<(TaskDispatch, Reply)>>>,
    queued: Arc<AtomicU64>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Executor {
    pub fn spawn(mut ctx: ExecContext) -> Self {
        let (tx, rx) = mpsc::channel::<(TaskDispatch, Reply)>();
        let queued = Arc::new(AtomicU64::new(0));
        let q = queued.clone();
        let thread = thread::Builder::new()
            .name(format!("exec-{}", ctx.worker_id))
            .spawn(move || {
                for (task, reply) in rx {
                    let result = execute(&mut ctx, &task);
                    q.fetch_sub(1, Ordering::Relaxed);
                    let _ = reply.send(result);
                }
            })
            .expect("spawn executor thread");
        Executor { tx: Mutex::new(Some(tx)), queued, thread: Mutex::new(Some(thread)) }
    }

    pub fn queue_length(&self) -> u64 {
        self.queued.load(Ordering::Relaxed)
    }

    pub fn submit(&self, task: TaskDispatch) -> Receiver<Result<TaskResult, TaskFailure>> {
        let (reply_tx, reply_rx) = mpsc::channel();
        let job_id = task.job_id;
        let guard = self.tx.lock().expect("executor lock");
        match guard.as_ref() {
            Some(tx) => {
                self.queued.fetch_add(1, Ordering::Relaxed);
                if tx.send((task, reply_tx.clone())).is_err() {
                    self.queued.fetch_sub(1, Ordering::Relaxed);
                    let _ = reply_tx.send(Err(TaskFailure::new(job_id, "executor_stopped", "executor is gone")));
                }
            }
            None => {
                let _ = reply_tx.send(Err(TaskFailure::new(job_id, "executor_stopped", "executor is shut down")));
            }
        }
        reply_rx
    }

    /// Submits and waits for the result.
    pub fn run(&self, task: TaskDispatch) -> Result<TaskResult, TaskFailure> {
        let job_id = task.job_id;
        self.submit(task)
            .recv()
            .unwrap_or_else(|_| Err(TaskFailure::new(job_id, "executor_stopped", "executor dropped the job")))
    }

    /// Finishes queued work, then stops the thread.
    pub fn shutdown(&self) {
        self.tx.lock().expect("executor lock").take();
        if let Some(t) = self.thread.lock().expect("executor lock").take() {
            let _ = t.join();
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.shutdown();
    }
}
