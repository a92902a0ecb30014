//! Background training runs and their pollable status.

use crate::error::ApiError;
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    /// Latest epoch progress while running, the training report once done.
    pub metrics: Value,
    pub error: Option<ApiError>,
}

#[derive(Default)]
pub struct Jobs {
    next: AtomicU64,
    busy: AtomicBool,
    jobs: Mutex<HashMap<String, Arc<Mutex<JobStatus>>>>,
}

/// Exclusive right to run training; released on drop.
pub struct Slot(Arc<Jobs>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

/// Write handle for one job.
#[derive(Clone)]
pub struct JobHandle(Arc<Mutex<JobStatus>>);

impl JobHandle {
    fn with(&self, f: impl FnOnce(&mut JobStatus)) {
        f(&mut self.0.lock().unwrap_or_else(|e| e.into_inner()));
    }

    pub fn progress(&self, epoch: usize, pair_loss: f64) {
        self.with(|s| s.metrics = json!({ "epoch": epoch, "pair_loss": pair_loss }));
    }

    pub fn finish(&self, outcome: Result<Value, ApiError>) {
        self.with(|s| match outcome {
            Ok(metrics) => {
                s.state = JobState::Done;
                s.metrics = metrics;
            }
            Err(e) => {
                s.state = JobState::Failed;
                s.error = Some(e);
            }
        });
    }
}

impl Jobs {
    pub fn try_acquire(self: &Arc<Self>) -> Option<Slot> {
        self.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).ok().map(|_| Slot(self.clone()))
    }

    /// Registers a new running job.
    pub fn create(&self) -> (String, JobHandle) {
        let id = format!("train-{:06}", self.next.fetch_add(1, Ordering::Relaxed) + 1);
        let status = JobStatus { job_id: id.clone(), state: JobState::Running, metrics: json!({}), error: None };
        let cell = Arc::new(Mutex::new(status));
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), cell.clone());
        (id, JobHandle(cell))
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        let jobs = self.jobs.lock().unwrap_or_else(|e| e.into_inner());
        jobs.get(id).map(|c| c.lock().unwrap_or_else(|e| e.into_inner()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_slot_at_a_time() {
        let jobs = Arc::new(Jobs::default());
        let slot = jobs.try_acquire().unwrap();
        assert!(jobs.try_acquire().is_none());
        drop(slot);
        assert!(jobs.try_acquire().is_some());
    }

    #[test]
    fn job_lifecycle() {
        let jobs = Jobs::default();
        let (id, handle) = jobs.create();
        assert_eq!(jobs.get(&id).unwrap().state, JobState::Running);
        handle.progress(3, 0.25);
        assert_eq!(jobs.get(&id).unwrap().metrics["epoch"], 3);
        handle.finish(Err(ApiError::internal("boom")));
        let s = jobs.get(&id).unwrap();
        assert_eq!(s.state, JobState::Failed);
        assert_eq!(s.error.unwrap().code, "INTERNAL");
        assert!(jobs.get("train-999999").is_none());
        assert_ne!(jobs.create().0, id);
    }
}
