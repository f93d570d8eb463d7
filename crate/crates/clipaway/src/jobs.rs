//! Persistent job store.
//!
//! Layout under the store root:
//!
//! ```text
//! <id>/job.json          job record, rewritten on each transition
//! <id>/image.png         source image
//! <id>/mask.png          binary mask (0/255)
//! <id>/result.png        output, present once DONE
//! <id>/diagnostics.json  diagnostics, present once DONE
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use clipaway_core::pipeline::{RemovalOptions, RemovalRequest};
use clipaway_core::raster::{encode_png_gray, encode_png_rgb, load_mask, load_rgb, BinaryMask};
use clipaway_core::Error;
use image::RgbImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// QUEUED → RUNNING → {DONE, FAILED}; a queued job may also fail directly.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Failed) | (Running, Done) | (Running, Failed)
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Queued => "QUEUED",
            JobState::Running => "RUNNING",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobError {
    pub reason: String,
    pub message: String,
}

/// What the client asked for, echoed back in every job response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub options: RemovalOptions,
    pub image_size: (u32, u32),
    pub masked_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    /// Submission order, stable across restarts.
    pub seq: u64,
    pub state: JobState,
    pub request: JobRequest,
    pub result_path: Option<PathBuf>,
    pub diagnostics_path: Option<PathBuf>,
    pub error: Option<JobError>,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error("job {id} cannot move from {from} to {to}")]
    InvalidTransition { id: String, from: JobState, to: JobState },
    #[error("job {id} is {state}, no result available")]
    NotDone { id: String, state: JobState },
    #[error(transparent)]
    Core(#[from] Error),
}

impl StoreError {
    pub fn reason(&self) -> &'static str {
        match self {
            StoreError::NotFound(_) => "job_not_found",
            StoreError::InvalidTransition { .. } => "invalid_transition",
            StoreError::NotDone { .. } => "job_not_done",
            StoreError::Core(e) => e.reason(),
        }
    }
}

type Slot = Arc<Mutex<Job>>;

pub struct JobStore {
    root: PathBuf,
    jobs: Mutex<BTreeMap<String, Slot>>,
    next_seq: AtomicU64,
}

/// Result of reopening a store after a restart.
#[derive(Debug, Default)]
pub struct Recovery {
    /// Jobs that never started, in submission order; the caller re-enqueues them.
    pub queued: Vec<String>,
    /// Jobs that were RUNNING when the previous process stopped.
    pub interrupted: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl JobStore {
    /// Open (or create) a store, failing any job left RUNNING with reason
    /// `interrupted`.
    pub fn open(root: impl Into<PathBuf>) -> Result<(Self, Recovery), StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut jobs = BTreeMap::new();
        let mut recovery = Recovery::default();
        let mut max_seq = 0;
        let mut queued = Vec::new();
        let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&root, e))?;
            let path = entry.path().join("job.json");
            if !path.is_file() {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut job: Job = match serde_json::from_slice(&bytes) {
                Ok(j) => j,
                Err(e) => {
                    log::warn!("skipping unreadable job record {}: {e}", path.display());
                    continue;
                }
            };
            max_seq = max_seq.max(job.seq + 1);
            match job.state {
                JobState::Running => {
                    job.state = JobState::Failed;
                    job.finished_at = Some(Utc::now());
                    job.error = Some(JobError {
                        reason: "interrupted".into(),
                        message: "the service stopped while this job was running".into(),
                    });
                    write_atomic(&path, &serde_json::to_vec_pretty(&job).map_err(Error::from)?)?;
                    recovery.interrupted.push(job.id.clone());
                }
                JobState::Queued => queued.push((job.seq, job.id.clone())),
                _ => {}
            }
            jobs.insert(job.id.clone(), Arc::new(Mutex::new(job)));
        }
        queued.sort();
        recovery.queued = queued.into_iter().map(|(_, id)| id).collect();
        Ok((
            Self {
                root,
                jobs: Mutex::new(jobs),
                next_seq: AtomicU64::new(max_seq),
            },
            recovery,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn slot(&self, id: &str) -> Result<Slot, StoreError> {
        self.jobs
            .lock()
            .expect("job index poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn persist(&self, job: &Job) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(job).map_err(Error::from)?;
        write_atomic(&self.job_dir(&job.id).join("job.json"), &bytes)?;
        Ok(())
    }

    /// Persist inputs and a QUEUED record.
    pub fn create(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        options: RemovalOptions,
        provenance: BTreeMap<String, String>,
    ) -> Result<Job, StoreError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.job_dir(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("image.png"), &encode_png_rgb(image)?)?;
        write_atomic(&dir.join("mask.png"), &encode_png_gray(&mask.to_gray())?)?;
        let job = Job {
            id: id.clone(),
            seq: self.next_seq.fetch_add(1, Ordering::SeqCst),
            state: JobState::Queued,
            request: JobRequest {
                options,
                image_size: image.dimensions(),
                masked_pixels: mask.count(),
            },
            result_path: None,
            diagnostics_path: None,
            error: None,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
            provenance,
        };
        self.persist(&job)?;
        self.jobs
            .lock()
            .expect("job index poisoned")
            .insert(id, Arc::new(Mutex::new(job.clone())));
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Result<Job, StoreError> {
        Ok(self.slot(id)?.lock().expect("job poisoned").clone())
    }

    pub fn list(&self) -> Vec<Job> {
        let slots: Vec<Slot> = self.jobs.lock().expect("job index poisoned").values().cloned().collect();
        let mut jobs: Vec<Job> = slots.iter().map(|s| s.lock().expect("job poisoned").clone()).collect();
        jobs.sort_by_key(|j| j.seq);
        jobs
    }

    /// Apply a transition under the job's lock; the record on disk is
    /// rewritten before the lock is released.
    fn transition(
        &self,
        id: &str,
        to: JobState,
        update: impl FnOnce(&mut Job) -> Result<(), StoreError>,
    ) -> Result<Job, StoreError> {
        let slot = self.slot(id)?;
        let mut job = slot.lock().expect("job poisoned");
        if !job.state.can_move_to(to) {
            return Err(StoreError::InvalidTransition {
                id: id.to_string(),
                from: job.state,
                to,
            });
        }
        let mut next = job.clone();
        update(&mut next)?;
        next.state = to;
        self.persist(&next)?;
        *job = next;
        Ok(job.clone())
    }

    pub fn mark_running(&self, id: &str) -> Result<Job, StoreError> {
        self.transition(id, JobState::Running, |j| {
            j.started_at = Some(Utc::now());
            Ok(())
        })
    }

    /// Write the result files, then flip the record to DONE.
    pub fn mark_done(&self, id: &str, output: &RgbImage, diagnostics: &serde_json::Value) -> Result<Job, StoreError> {
        let dir = self.job_dir(id);
        self.transition(id, JobState::Done, |j| {
            let result = dir.join("result.png");
            let diag = dir.join("diagnostics.json");
            write_atomic(&result, &encode_png_rgb(output)?)?;
            write_atomic(&diag, &serde_json::to_vec_pretty(diagnostics).map_err(Error::from)?)?;
            j.result_path = Some(result);
            j.diagnostics_path = Some(diag);
            j.finished_at = Some(Utc::now());
            Ok(())
        })
    }

    pub fn mark_failed(&self, id: &str, reason: &str, message: &str) -> Result<Job, StoreError> {
        self.transition(id, JobState::Failed, |j| {
            j.finished_at = Some(Utc::now());
            j.error = Some(JobError {
                reason: reason.to_string(),
                message: message.to_string(),
            });
            Ok(())
        })
    }

    /// Rebuild the removal request from the stored inputs.
    pub fn load_request(&self, id: &str) -> Result<RemovalRequest, StoreError> {
        let job = self.get(id)?;
        let dir = self.job_dir(id);
        let image = load_rgb(&dir.join("image.png"))?;
        let mask = load_mask(&dir.join("mask.png"))?;
        Ok(RemovalRequest {
            image,
            mask,
            options: job.request.options,
        })
    }

    fn done_file(&self, id: &str, pick: impl Fn(&Job) -> Option<PathBuf>) -> Result<Vec<u8>, StoreError> {
        let job = self.get(id)?;
        match (job.state, pick(&job)) {
            (JobState::Done, Some(path)) => Ok(std::fs::read(&path).map_err(|e| Error::io(&path, e))?),
            (state, _) => Err(StoreError::NotDone { id: id.to_string(), state }),
        }
    }

    pub fn result_png(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.done_file(id, |j| j.result_path.clone())
    }

    pub fn diagnostics_json(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.done_file(id, |j| j.diagnostics_path.clone())
    }

    /// Delete terminal jobs that finished before `cutoff`; returns how many.
    pub fn purge_finished_before(&self, cutoff: DateTime<Utc>) -> usize {
        let mut index = self.jobs.lock().expect("job index poisoned");
        let expired: Vec<String> = index
            .iter()
            .filter(|(_, slot)| {
                let j = slot.lock().expect("job poisoned");
                j.state.is_terminal() && j.finished_at.is_some_and(|t| t < cutoff)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            index.remove(id);
            let dir = self.job_dir(id);
            if let Err(e) = std::fs::remove_dir_all(&dir) {
                log::warn!("could not remove {}: {e}", dir.display());
            }
        }
        expired.len()
    }
}
