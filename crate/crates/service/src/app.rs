//! Session operations behind the HTTP routes, plus the background workers
//! that run analyses.
//!
//! Every change to a session happens while holding that session's lock and
//! starts by reloading it from the store, so a request can never overwrite a
//! state change made by another request or by a finishing job.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use stutter_core::audio::{encode_wav, load_canonical, AudioClip, AudioError};
use stutter_core::features::{spectrogram_slice, FeatureExtractor, LOG_FLOOR};
use stutter_core::speaker::{train_speaker_model, SpeakerLabel, MIN_ENROLLMENT_PER_SIDE};
use stutter_core::store::{
    Artifact, LoadedSession, Session, SessionFilter, SessionState, SessionSummary, SessionTask,
    Store,
};
use stutter_core::{Enrollment, EnrollmentSet, Pipeline, PipelineOutput};
use tokio::sync::{OwnedMutexGuard, Semaphore};

use crate::error::ApiError;
use crate::jobs::{Clock, Job, JobRegistry};
use crate::staging::Staging;

/// Spectrogram requests must span strictly less than this.
pub const MAX_SPECTROGRAM_SPAN_S: f64 = 10.0;

pub struct App {
    store: Store,
    staging: Staging,
    pipeline: Pipeline,
    jobs: JobRegistry,
    clock: Arc<dyn Clock>,
    workers: Arc<Semaphore>,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Enrolled {
    pub therapist: bool,
    pub client: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub enrolled: Enrolled,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job: Option<Job>,
}

/// What the speaker filter will do with the enrollments stored so far.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ModelStatus {
    /// Nothing is filtered until the therapist enrolls.
    AwaitingTherapist,
    /// Client material will come from the start of the recording.
    ClientFromRecording,
    Trained {
        train_margin: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct EnrollmentStatus {
    pub speaker: SpeakerLabel,
    pub speech_s: f64,
    pub embeddings: usize,
    pub model: ModelStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkStatus {
    pub chunks: usize,
    pub staged_s: f64,
}

/// A power spectrogram in decibels, rows at `frame_times_s`.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrogramView {
    pub start_s: f64,
    pub end_s: f64,
    pub fft_size: usize,
    pub bin_hz: f64,
    pub hop_s: f64,
    pub frame_times_s: Vec<f64>,
    pub power_db: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub requeued: Vec<String>,
    pub unreadable: Vec<String>,
    pub discarded_staging: Vec<String>,
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker thread: {e}")))
}

fn require_state(
    session: &Session,
    state: SessionState,
    action: &'static str,
) -> Result<(), ApiError> {
    if session.state == state {
        Ok(())
    } else {
        Err(ApiError::InvalidState {
            state: session.state,
            action,
        })
    }
}

fn enrollment_artifact(speaker: SpeakerLabel) -> Artifact {
    match speaker {
        SpeakerLabel::Therapist => Artifact::TherapistEnrollment,
        SpeakerLabel::Client => Artifact::ClientEnrollment,
    }
}

/// `0 ≤ from < to ≤ duration`, all finite.
fn check_range(from_s: f64, to_s: f64, duration_s: f64) -> Result<(), ApiError> {
    let ok = from_s.is_finite()
        && to_s.is_finite()
        && from_s >= 0.0
        && from_s < to_s
        && to_s <= duration_s;
    if ok {
        Ok(())
    } else {
        Err(ApiError::RangeOutOfBounds {
            from_s,
            to_s,
            duration_s,
        })
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl App {
    /// Opens the store under `data_dir` and prepares `workers` analysis
    /// slots. Call [`App::recover`] before serving requests.
    pub fn open(
        data_dir: &Path,
        pipeline: Pipeline,
        workers: usize,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, ApiError> {
        let store = Store::open(data_dir)?;
        let staging = Staging::open(data_dir.join("staging"))
            .map_err(|e| ApiError::Internal(format!("staging directory: {e}")))?;
        Ok(Arc::new(Self {
            store,
            staging,
            pipeline,
            jobs: JobRegistry::new(clock.clone()),
            clock,
            workers: Arc::new(Semaphore::new(workers.max(1))),
            session_locks: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn jobs(&self) -> &JobRegistry {
        &self.jobs
    }

    async fn lock_session(&self, id: &str) -> OwnedMutexGuard<()> {
        let lock = self
            .session_locks
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(id.to_string())
            .or_default()
            .clone();
        lock.lock_owned().await
    }

    /// Startup recovery: repairs the store, restarts analyses interrupted
    /// by a shutdown and drops staged chunks of sessions that are no longer
    /// recording.
    pub fn recover(self: &Arc<Self>) -> Result<Recovery, ApiError> {
        let report = self.store.repair()?;
        let mut recovery = Recovery {
            unreadable: report.unreadable,
            ..Recovery::default()
        };
        let sessions = self.store.list_sessions(&SessionFilter::default())?;
        for summary in &sessions {
            if summary.state == SessionState::Processing {
                let job = self
                    .jobs
                    .submit(&summary.id)
                    .map_err(|active| ApiError::JobActive { job_id: active.id })?;
                self.spawn_worker(job);
                recovery.requeued.push(summary.id.clone());
            }
        }
        let staged = self
            .staging
            .sessions()
            .map_err(|e| ApiError::Internal(format!("staging directory: {e}")))?;
        for id in staged {
            let recording = sessions
                .iter()
                .any(|s| s.id == id && s.state == SessionState::Recording);
            if !recording {
                self.discard_staging(&id)?;
                recovery.discarded_staging.push(id);
            }
        }
        Ok(recovery)
    }

    fn discard_staging(&self, id: &str) -> Result<(), ApiError> {
        self.staging
            .discard(id)
            .map_err(|e| ApiError::Internal(format!("staging for {id}: {e}")))
    }

    fn view(&self, loaded: &LoadedSession) -> SessionView {
        SessionView {
            session: loaded.session().clone(),
            enrolled: Enrolled {
                therapist: loaded.has(Artifact::TherapistEnrollment),
                client: loaded.has(Artifact::ClientEnrollment),
            },
            artifacts: loaded.manifest().artifacts.keys().cloned().collect(),
            job: self.jobs.latest_for(&loaded.session().id),
        }
    }

    pub async fn create_session(
        &self,
        task: SessionTask,
        reading_text: Option<String>,
    ) -> Result<SessionView, ApiError> {
        let reading_text = match (task, reading_text) {
            (SessionTask::Reading, Some(text)) if !text.trim().is_empty() => Some(text),
            (SessionTask::Reading, _) => return Err(ApiError::MissingReadingText),
            (SessionTask::Conversation, Some(_)) => {
                return Err(ApiError::BadRequest(
                    "conversation sessions take no reading_text".into(),
                ))
            }
            (SessionTask::Conversation, None) => None,
        };
        let session = Session::new(task, reading_text, self.clock.now_ms())?;
        let _guard = self.lock_session(&session.id).await;
        self.store.save_session(&session, &[])?;
        Ok(self.view(&self.store.load_session(&session.id)?))
    }

    pub fn list_sessions(&self, filter: &SessionFilter) -> Result<Vec<SessionSummary>, ApiError> {
        Ok(self.store.list_sessions(filter)?)
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ApiError> {
        Ok(self.view(&self.store.load_session(id)?))
    }

    pub fn job(&self, job_id: &str) -> Result<Job, ApiError> {
        self.jobs
            .get(job_id)
            .ok_or_else(|| ApiError::NotFound(format!("job {job_id}")))
    }

    /// Stores one speaker's enrollment. A therapist clip needs the
    /// configured minimum of speech; a client clip enough speech for the
    /// minimum number of training chunks. Once both sides are enrolled the
    /// speaker model must train, otherwise the second enrollment is refused.
    pub async fn enroll(
        self: &Arc<Self>,
        id: &str,
        speaker: SpeakerLabel,
        bytes: Vec<u8>,
    ) -> Result<EnrollmentStatus, ApiError> {
        let _guard = self.lock_session(id).await;
        let loaded = self.store.load_session(id)?;
        require_state(loaded.session(), SessionState::Recording, "enrollment")?;
        let artifact = enrollment_artifact(speaker);
        if loaded.has(artifact) {
            return Err(ApiError::Conflict(format!(
                "{speaker:?} is already enrolled for this session"
            )));
        }
        let app = self.clone();
        let set = blocking(move || -> Result<EnrollmentSet, ApiError> {
            let clip =
                load_canonical(&bytes).map_err(|e| ApiError::MalformedAudio(e.to_string()))?;
            Ok(app.pipeline.enroll(&clip, speaker)?)
        })
        .await??;
        if speaker == SpeakerLabel::Client && set.embeddings.len() < MIN_ENROLLMENT_PER_SIDE {
            return Err(ApiError::TooLittleSpeech {
                speech_s: set.speech_s,
                required_s: MIN_ENROLLMENT_PER_SIDE as f64 * self.pipeline.config().speaker.chunk_s,
            });
        }

        let other = match speaker {
            SpeakerLabel::Therapist => loaded.enrollment(Artifact::ClientEnrollment)?,
            SpeakerLabel::Client => loaded.enrollment(Artifact::TherapistEnrollment)?,
        };
        let model = match (speaker, &other) {
            (SpeakerLabel::Therapist, None) => ModelStatus::ClientFromRecording,
            (SpeakerLabel::Client, None) => ModelStatus::AwaitingTherapist,
            (_, Some(other)) => {
                let (therapist, client) = match speaker {
                    SpeakerLabel::Therapist => (&set, other),
                    SpeakerLabel::Client => (other, &set),
                };
                let model = train_speaker_model(
                    &therapist.embeddings,
                    &client.embeddings,
                    &self.pipeline.config().speaker.svm,
                )
                .map_err(|e| ApiError::NotSeparable(e.to_string()))?;
                ModelStatus::Trained {
                    train_margin: model.train_margin(),
                }
            }
        };

        let json = serde_json::to_vec(&set).map_err(|e| ApiError::Internal(e.to_string()))?;
        self.store
            .save_session(loaded.session(), &[(artifact, &json)])?;
        Ok(EnrollmentStatus {
            speaker,
            speech_s: set.speech_s,
            embeddings: set.embeddings.len(),
            model,
        })
    }

    /// Accepts a complete recording and starts its analysis.
    pub async fn submit_recording(
        self: &Arc<Self>,
        id: &str,
        bytes: Vec<u8>,
    ) -> Result<Job, ApiError> {
        let _guard = self.lock_session(id).await;
        let loaded = self.store.load_session(id)?;
        require_state(
            loaded.session(),
            SessionState::Recording,
            "submitting a recording",
        )?;
        let decoded = blocking(move || load_canonical(&bytes)).await?;
        self.accept_recording(loaded.session().clone(), decoded)
    }

    /// Stages one chunk of a live recording; analysis waits for
    /// [`App::stop_recording`].
    pub async fn append_chunk(&self, id: &str, bytes: Vec<u8>) -> Result<ChunkStatus, ApiError> {
        let _guard = self.lock_session(id).await;
        let loaded = self.store.load_session(id)?;
        require_state(loaded.session(), SessionState::Recording, "appending audio")?;
        let clip = blocking(move || load_canonical(&bytes))
            .await?
            .map_err(|e| ApiError::MalformedAudio(e.to_string()))?;
        let staging_err = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::StorageFull => ApiError::StorageFull,
            _ => ApiError::Internal(format!("staging: {e}")),
        };
        let chunks = self.staging.append(id, &clip).map_err(staging_err)?;
        let staged_s = self.staging.staged_s(id).map_err(staging_err)?;
        Ok(ChunkStatus { chunks, staged_s })
    }

    /// Joins the staged chunks into the session's recording and starts its
    /// analysis.
    pub async fn stop_recording(self: &Arc<Self>, id: &str) -> Result<Job, ApiError> {
        let _guard = self.lock_session(id).await;
        let loaded = self.store.load_session(id)?;
        require_state(
            loaded.session(),
            SessionState::Recording,
            "stopping a recording",
        )?;
        let clip = self
            .staging
            .assemble(id)
            .map_err(|e| ApiError::Internal(format!("staging: {e}")))?
            .ok_or_else(|| ApiError::BadRequest("no audio chunks were uploaded".into()))?;
        self.accept_recording(loaded.session().clone(), Ok(clip))
    }

    /// Stores the canonical recording, moves the session to processing and
    /// queues its analysis. Undecodable audio fails the session instead.
    /// The caller holds the session lock.
    fn accept_recording(
        self: &Arc<Self>,
        mut session: Session,
        decoded: Result<AudioClip, AudioError>,
    ) -> Result<Job, ApiError> {
        let decoded = decoded.map_err(|e| e.to_string()).and_then(|clip| {
            if clip.is_empty() {
                Err("recording holds no samples".to_string())
            } else {
                Ok(clip)
            }
        });
        let clip = match decoded {
            Ok(clip) => clip,
            Err(message) => {
                session.error = Some(format!("malformed audio: {message}"));
                session.transition(SessionState::Failed)?;
                self.store.save_session(&session, &[])?;
                self.discard_staging(&session.id)?;
                return Err(ApiError::MalformedAudio(message));
            }
        };
        session.transition(SessionState::Processing)?;
        self.store
            .save_session(&session, &[(Artifact::Audio, &encode_wav(&clip))])?;
        self.discard_staging(&session.id)?;
        let job = self
            .jobs
            .submit(&session.id)
            .map_err(|active| ApiError::JobActive { job_id: active.id })?;
        self.spawn_worker(job.clone());
        Ok(job)
    }

    fn spawn_worker(self: &Arc<Self>, job: Job) {
        let app = self.clone();
        tokio::spawn(async move {
            let _permit = app
                .workers
                .clone()
                .acquire_owned()
                .await
                .expect("worker semaphore is never closed");
            app.jobs.start(&job.id);
            tracing::info!(job = %job.id, session = %job.session_id, "analysis started");
            let worker = app.clone();
            let run = {
                let job = job.clone();
                blocking(move || worker.analyze_stored(&job)).await
            };
            let outcome = app
                .record_outcome(&job.session_id, run.and_then(|r| r))
                .await;
            match &outcome {
                Ok(()) => tracing::info!(job = %job.id, "analysis done"),
                Err(message) => tracing::warn!(job = %job.id, %message, "analysis failed"),
            }
            app.jobs.finish(&job.id, outcome);
        });
    }

    fn analyze_stored(&self, job: &Job) -> Result<PipelineOutput, ApiError> {
        let loaded = self.store.load_session(&job.session_id)?;
        let clip = loaded
            .audio()?
            .ok_or_else(|| ApiError::Internal("session has no stored recording".into()))?;
        let enrollment = Enrollment {
            therapist: loaded.enrollment(Artifact::TherapistEnrollment)?,
            client: loaded.enrollment(Artifact::ClientEnrollment)?,
        };
        Ok(self
            .pipeline
            .run(&clip, &enrollment, &mut |p| self.jobs.progress(&job.id, p))?)
    }

    /// Saves a finished analysis, or marks the session failed.
    async fn record_outcome(
        &self,
        id: &str,
        outcome: Result<PipelineOutput, ApiError>,
    ) -> Result<(), String> {
        let _guard = self.lock_session(id).await;
        let session = self
            .store
            .load_session(id)
            .map_err(|e| e.to_string())?
            .session()
            .clone();
        let saved = outcome.and_then(|out| {
            let features = out.features.to_bytes();
            let analysis = out.bundle.to_json();
            let model = out.speaker_model.map(|m| m.to_bytes());
            let mut artifacts = vec![
                (Artifact::Features, &features[..]),
                (Artifact::Analysis, &analysis[..]),
            ];
            if let Some(model) = &model {
                artifacts.push((Artifact::SpeakerModel, model));
            }
            let mut analyzed = session.clone();
            analyzed.transition(SessionState::Analyzed)?;
            Ok(self.store.save_session(&analyzed, &artifacts)?)
        });
        let Err(err) = saved else {
            return Ok(());
        };
        let message = err.to_string();
        let mut failed = session;
        failed.error = Some(message.clone());
        if let Err(e) = failed
            .transition(SessionState::Failed)
            .and_then(|()| self.store.save_session(&failed, &[]))
        {
            tracing::error!(session = %id, error = %e, "could not mark session failed");
        }
        Err(message)
    }

    /// The stored `analysis.json` bytes.
    pub fn analysis(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let loaded = self.store.load_session(id)?;
        let session = loaded.session();
        match session.state {
            SessionState::Analyzed => loaded
                .read(Artifact::Analysis)?
                .ok_or_else(|| ApiError::Internal("analyzed session has no analysis".into())),
            SessionState::Recording => Err(ApiError::NotReady { progress: 0.0 }),
            SessionState::Processing => Err(ApiError::NotReady {
                progress: self
                    .jobs
                    .latest_for(id)
                    .filter(|j| j.state.is_active())
                    .map_or(0.0, |j| j.progress),
            }),
            SessionState::Failed => Err(ApiError::AnalysisFailed(
                session
                    .error
                    .clone()
                    .unwrap_or_else(|| "unknown error".into()),
            )),
        }
    }

    fn recording(loaded: &LoadedSession) -> Result<AudioClip, ApiError> {
        loaded.audio()?.ok_or(ApiError::InvalidState {
            state: loaded.session().state,
            action: "reading audio before a recording is stored",
        })
    }

    /// Power spectrogram of `[from_s, to_s)` computed from the stored
    /// recording, in dB rounded to 0.01.
    pub async fn spectrogram(
        self: &Arc<Self>,
        id: &str,
        from_s: f64,
        to_s: f64,
    ) -> Result<SpectrogramView, ApiError> {
        // an invalid range is reported as such before the span limit
        check_range(from_s, to_s, f64::INFINITY)?;
        if to_s - from_s >= MAX_SPECTROGRAM_SPAN_S {
            return Err(ApiError::SpanTooLong {
                span_s: to_s - from_s,
            });
        }
        let app = self.clone();
        let id = id.to_string();
        blocking(move || {
            let loaded = app.store.load_session(&id)?;
            let clip = Self::recording(&loaded)?;
            check_range(from_s, to_s, clip.duration_s())?;
            let extractor = FeatureExtractor::default();
            let slice = spectrogram_slice(&clip, extractor.grid(), from_s, to_s);
            Ok(SpectrogramView {
                start_s: slice.start_s,
                end_s: slice.end_s,
                fft_size: slice.fft_size,
                bin_hz: slice.bin_hz,
                hop_s: slice.hop_s,
                frame_times_s: slice.frame_times_s,
                power_db: slice
                    .frames
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|&p| round2(10.0 * p.max(LOG_FLOOR).log10()))
                            .collect()
                    })
                    .collect(),
            })
        })
        .await?
    }

    /// The stored recording as WAV: verbatim without a range, otherwise the
    /// samples `[round(from·rate), round(to·rate))` re-encoded.
    pub async fn audio(
        self: &Arc<Self>,
        id: &str,
        range: Option<(f64, f64)>,
    ) -> Result<Vec<u8>, ApiError> {
        let app = self.clone();
        let id = id.to_string();
        blocking(move || {
            let loaded = app.store.load_session(&id)?;
            let Some((from_s, to_s)) = range else {
                return loaded.read(Artifact::Audio)?.ok_or(ApiError::InvalidState {
                    state: loaded.session().state,
                    action: "reading audio before a recording is stored",
                });
            };
            let clip = Self::recording(&loaded)?;
            check_range(from_s, to_s, clip.duration_s())?;
            let slice = clip.slice(clip.index_at(from_s), clip.index_at(to_s).min(clip.len()));
            Ok(encode_wav(&slice))
        })
        .await?
    }
}
