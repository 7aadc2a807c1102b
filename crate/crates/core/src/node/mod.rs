//! Gateway, master and worker roles.
//!
//! A gateway asks the master for a placement, then ships the job's CSV
//! straight to the chosen target. The master keeps a registry of worker
//! load reports, arbitrates each job against a fresh load check, and can
//! execute jobs itself or forward them to a cloud node.

mod config;
mod executor;
mod gateway;
mod job;
mod load;
mod master;
mod net;
mod registry;
mod worker;

use std::time::Duration;

use thiserror::Error;

use crate::protocol::ProtocolError;

pub use config::{NodeConfig, Role};
pub use executor::{execute, ExecContext, Executor, TaskFailure};
pub use gateway::{submit_job, Gateway, JobOutcome};
pub use job::{InvalidTransition, JobRecord, JobState};
pub use load::LoadSampler;
pub use master::{run_master, MasterHandle};
pub use net::Endpoint;
pub use registry::{arbitrate, Placement, Snapshot, WorkerEntry, WorkerRegistry, WorkerView, MISSED_HEARTBEATS};
pub use worker::{run_worker, WorkerHandle};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid job input: {0}")]
    InvalidInput(String),
    #[error("cannot bind {address}: {reason}")]
    BindFailure { address: String, reason: String },
    #[error("master unreachable after {attempts} attempts: {last}")]
    MasterUnreachable { attempts: u32, last: String },
    #[error("no placement within {0:?}")]
    PlacementTimeout(Duration),
    #[error("no result within {waited:?}: {cause}")]
    DispatchTimeout { waited: Duration, cause: String },
    #[error("dispatched {expected} rows, got {got} predictions")]
    ResultMismatch { expected: usize, got: usize },
    #[error("job {job_id:?} failed on the executor: {code}: {detail}")]
    TaskFailure { job_id: Option<u64>, code: String, detail: String },
    #[error("worker training failed: {0}")]
    WorkerTrainingFailure(String),
    #[error("unexpected {got} message, expected {expected}")]
    Unexpected { expected: &'static str, got: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// Read timeouts surface as `WouldBlock` on Unix and `TimedOut` elsewhere.
pub(crate) fn is_timeout(e: &ProtocolError) -> bool {
    matches!(e, ProtocolError::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}
