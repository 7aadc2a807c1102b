use thiserror::Error;

use super::registry::Placement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JobState {
    Received,
    Arbitrating,
    Dispatched,
    Completed,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("job {job_id}: illegal transition {from:?} -> {to:?}")]
pub struct InvalidTransition {
    pub job_id: u64,
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub job_id: u64,
    pub gateway_id: String,
    pub state: JobState,
    pub placement: Option<Placement>,
    /// (state, monotonic ms) for every state entered, in order.
    pub transitions: Vec<(JobState, u64)>,
}

impl JobRecord {
    pub fn new(job_id: u64, gateway_id: impl Into<String>, now_ms: u64) -> Self {
        JobRecord {
            job_id,
            gateway_id: gateway_id.into(),
            state: JobState::Received,
            placement: None,
            transitions: vec![(JobState::Received, now_ms)],
        }
    }

    /// Moves strictly forward one step at a time; `Failed` is reachable
    /// from any non-terminal state.
    pub fn advance(&mut self, to: JobState, now_ms: u64) -> Result<(), InvalidTransition> {
        let ok = match (self.state, to) {
            (from, JobState::Failed) => !from.is_terminal(),
            (JobState::Received, JobState::Arbitrating)
            | (JobState::Arbitrating, JobState::Dispatched)
            | (JobState::Dispatched, JobState::Completed) => true,
            _ => false,
        };
        if !ok {
            return Err(InvalidTransition { job_id: self.job_id, from: self.state, to });
        }
        self.state = to;
        self.transitions.push((to, now_ms));
        Ok(())
    }
}
