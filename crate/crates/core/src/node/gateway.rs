use std::net::TcpStream;
use std::time::{Duration, Instant};

use crate::bench::TimingRecord;
use crate::dataset;
use crate::models::Prediction;
use crate::protocol::{JobRequest, ModelRef, Payload, PlacementResponse, ProtocolError, Task, TaskDispatch, TaskOutput};

use super::config::NodeConfig;
use super::net::{self, Endpoint};
use super::{is_timeout, NodeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    /// In input row order.
    pub predictions: Vec<Prediction>,
    pub timing: TimingRecord,
    pub placement: PlacementResponse,
    pub worker_id: String,
}

/// Submits jobs on behalf of one gateway node; reuse it so message ids stay
/// unique for the session.
#[derive(Debug)]
pub struct Gateway {
    cfg: NodeConfig,
    endpoint: Endpoint,
}

fn dispatch_failure(waited: Duration, cause: impl ToString) -> NodeError {
    NodeError::DispatchTimeout { waited, cause: cause.to_string() }
}

impl Gateway {
    pub fn new(cfg: NodeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Gateway { endpoint: Endpoint::new(&cfg), cfg })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    fn request_placement(
        &self,
        job_id: u64,
        rows: usize,
        bytes: usize,
        traffic: &mut (u64, u64),
    ) -> Result<PlacementResponse> {
        let timeout = self.cfg.placement_timeout();
        let address = self.cfg.master_address()?;
        let mut conn = net::connect(address, timeout)
            .map_err(|e| NodeError::MasterUnreachable { attempts: 1, last: e.to_string() })?;
        conn.set_read_timeout(Some(timeout))?;
        let req = JobRequest { job_id, rows: rows as u64, bytes: bytes as u64 };
        traffic.0 += self.endpoint.send(&mut conn, &self.cfg.master_id, Payload::JobRequest(req))? as u64;
        let (msg, n) = self.endpoint.recv(&mut conn).map_err(|e| {
            if is_timeout(&e) {
                NodeError::PlacementTimeout(timeout)
            } else {
                e.into()
            }
        })?;
        traffic.1 += n as u64;
        match msg.payload {
            Payload::PlacementResponse(p) if p.job_id == job_id => Ok(p),
            Payload::Error(e) => Err(NodeError::TaskFailure { job_id: e.job_id, code: e.code, detail: e.detail }),
            other => Err(NodeError::Unexpected { expected: "placement_response", got: other.msg_type().to_string() }),
        }
    }

    fn dispatch(
        &self,
        placement: &PlacementResponse,
        task: TaskDispatch,
        traffic: &mut (u64, u64),
    ) -> Result<(crate::protocol::TaskResult, Duration)> {
        let timeout = self.cfg.dispatch_timeout();
        let start = Instant::now();
        let mut conn: TcpStream =
            net::connect(&placement.target_address, timeout).map_err(|e| dispatch_failure(start.elapsed(), e))?;
        traffic.0 += self.endpoint.send(&mut conn, &placement.target_id, Payload::TaskDispatch(task))? as u64;
        let left = timeout.saturating_sub(start.elapsed()).max(Duration::from_millis(1));
        conn.set_read_timeout(Some(left))?;
        let (msg, n) = self.endpoint.recv(&mut conn).map_err(|e| match e {
            ProtocolError::Closed => dispatch_failure(start.elapsed(), "target closed the connection"),
            e if is_timeout(&e) => dispatch_failure(start.elapsed(), "timed out"),
            ProtocolError::Io(io) => dispatch_failure(start.elapsed(), io),
            e => e.into(),
        })?;
        traffic.1 += n as u64;
        match msg.payload {
            Payload::TaskResult(r) => Ok((r, start.elapsed())),
            Payload::Error(e) => Err(NodeError::TaskFailure { job_id: e.job_id, code: e.code, detail: e.detail }),
            other => Err(NodeError::Unexpected { expected: "task_result", got: other.msg_type().to_string() }),
        }
    }

    /// Two-phase submission: placement from the master, then the CSV goes
    /// to the chosen target. Response time runs from just before the job
    /// request is sent until the result arrives.
    pub fn submit_job(&self, job_id: u64, csv: &str, model: ModelRef) -> Result<JobOutcome> {
        let rows = dataset::parse_feature_rows(csv)
            .map_err(|e| NodeError::InvalidInput(e.to_string()))?
            .len();
        let mut traffic = (0u64, 0u64);
        let start = Instant::now();
        let placement = self.request_placement(job_id, rows, csv.len(), &mut traffic)?;
        let task = TaskDispatch { job_id, task: Task::Predict { model, csv: csv.to_string() } };
        let (result, _) = self.dispatch(&placement, task, &mut traffic)?;
        let response_ms = start.elapsed().as_secs_f64() * 1000.0;
        let TaskOutput::Predictions { rows: predictions } = result.output else {
            return Err(NodeError::Unexpected { expected: "predictions", got: "model".into() });
        };
        if predictions.len() != rows {
            return Err(NodeError::ResultMismatch { expected: rows, got: predictions.len() });
        }
        let timing = TimingRecord::new(
            job_id,
            placement.arbitration_ms,
            result.execution_ms,
            response_ms,
            traffic.0,
            traffic.1,
        );
        Ok(JobOutcome { predictions, timing, placement, worker_id: result.worker_id })
    }
}

/// One-shot submission with a job id derived from the clock.
pub fn submit_job(cfg: &NodeConfig, csv: &str, model: ModelRef) -> Result<(Vec<Prediction>, TimingRecord)> {
    let job_id = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(1, |d| d.as_nanos() as u64);
    let outcome = Gateway::new(cfg.clone())?.submit_job(job_id, csv, model)?;
    Ok((outcome.predictions, outcome.timing))
}
