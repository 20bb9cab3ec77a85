//! Background analysis jobs: at most one active job per session, progress
//! that never goes backwards.

use std::collections::HashMap;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use stutter_core::store::random_id;

/// Source of timestamps, so tests can drive time by hand.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        stutter_core::time::now_ms()
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start_ms: i64) -> Self {
        Self(AtomicI64::new(start_ms))
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub state: JobState,
    /// In `[0, 1]`; exactly 1 only once done.
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub queued_at_ms: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at_ms: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<i64>,
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Job>,
    /// Session id to its most recent job.
    latest: HashMap<String, String>,
}

pub struct JobRegistry {
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

/// Progress reported while running stays below this; only completion
/// reaches 1.
const RUNNING_CAP: f64 = 0.999;

impl JobRegistry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            inner: Mutex::new(Inner::default()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Queues a job for `session_id`, or returns the job already active for
    /// it as the error.
    pub fn submit(&self, session_id: &str) -> Result<Job, Box<Job>> {
        let mut inner = self.lock();
        if let Some(current) = inner
            .latest
            .get(session_id)
            .and_then(|id| inner.jobs.get(id))
        {
            if current.state.is_active() {
                return Err(Box::new(current.clone()));
            }
        }
        let job = Job {
            id: random_id(),
            session_id: session_id.to_string(),
            state: JobState::Queued,
            progress: 0.0,
            error: None,
            queued_at_ms: self.clock.now_ms(),
            started_at_ms: None,
            finished_at_ms: None,
        };
        inner.latest.insert(session_id.to_string(), job.id.clone());
        inner.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut Job, i64)) {
        let now = self.clock.now_ms();
        if let Some(job) = self.lock().jobs.get_mut(job_id) {
            f(job, now);
        }
    }

    pub fn start(&self, job_id: &str) {
        self.update(job_id, |job, now| {
            if job.state == JobState::Queued {
                job.state = JobState::Running;
                job.started_at_ms = Some(now);
            }
        });
    }

    /// Raises the progress of a running job; lower values are ignored.
    pub fn progress(&self, job_id: &str, value: f64) {
        self.update(job_id, |job, _| {
            if job.state == JobState::Running && value.is_finite() {
                job.progress = job.progress.max(value.clamp(0.0, RUNNING_CAP));
            }
        });
    }

    /// Ends an active job. Finishing twice keeps the first outcome.
    pub fn finish(&self, job_id: &str, outcome: Result<(), String>) {
        self.update(job_id, |job, now| {
            if !job.state.is_active() {
                return;
            }
            job.finished_at_ms = Some(now);
            match outcome {
                Ok(()) => {
                    job.state = JobState::Done;
                    job.progress = 1.0;
                }
                Err(message) => {
                    job.state = JobState::Failed;
                    job.error = Some(message);
                }
            }
        });
    }

    pub fn get(&self, job_id: &str) -> Option<Job> {
        self.lock().jobs.get(job_id).cloned()
    }

    /// Every job, oldest first, read under one lock.
    pub fn snapshot(&self) -> Vec<Job> {
        let mut jobs: Vec<Job> = self.lock().jobs.values().cloned().collect();
        jobs.sort_by(|a, b| {
            a.queued_at_ms
                .cmp(&b.queued_at_ms)
                .then_with(|| a.id.cmp(&b.id))
        });
        jobs
    }

    /// The most recent job of a session, active or not.
    pub fn latest_for(&self, session_id: &str) -> Option<Job> {
        let inner = self.lock();
        inner
            .latest
            .get(session_id)
            .and_then(|id| inner.jobs.get(id))
            .cloned()
    }
}
