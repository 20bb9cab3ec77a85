//! On-device session storage.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/index.json
//! sessions/<id>/manifest.json
//! sessions/<id>/audio.wav | features.bin | analysis.json | speaker.model | ...
//! ```
//!
//! Every file is written to a temporary name and renamed into place. A save
//! writes artifacts first, then the manifest, then the index, so the index
//! only ever lists sessions whose manifest and artifacts are complete. An
//! artifact already referenced by the manifest is never rewritten with
//! different content. Each artifact carries a 64-bit FNV-1a checksum that is
//! verified on load.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::hash::Hasher;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{decode_recording, AudioClip};
use crate::bundle::AnalysisBundle;
use crate::features::FeatureMatrix;
use crate::pipeline::EnrollmentSet;
use crate::speaker::SpeakerModel;

const INDEX_FILE: &str = "index.json";
const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";
const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {id}: artifact {artifact} failed verification")]
    CorruptArtifact { id: String, artifact: String },
    #[error("session {0} is being written by another writer")]
    WriteConflict(String),
    #[error("storage is full")]
    StorageFull,
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error("session {id}: cannot move from {from} to {to}")]
    InvalidTransition {
        id: String,
        from: SessionState,
        to: SessionState,
    },
    #[error("storage i/o: {0}")]
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(err)
        }
    }
}

/// 64-bit FNV-1a of `bytes`, as 16 lowercase hex digits.
pub fn checksum(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

/// 128 random bits as 32 lowercase hex digits.
pub fn random_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

pub fn new_session_id() -> String {
    random_id()
}

fn valid_id(id: &str) -> bool {
    id.len() == 32
        && id
            .bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionTask {
    Reading,
    Conversation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Recording,
    Processing,
    Analyzed,
    Failed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Recording => "recording",
            SessionState::Processing => "processing",
            SessionState::Analyzed => "analyzed",
            SessionState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Milliseconds since the Unix epoch, UTC.
    pub created_at: i64,
    pub task: SessionTask,
    pub reading_text: Option<String>,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Session {
    /// A fresh session in the `recording` state. Reading tasks need
    /// non-empty text; conversations must not carry any.
    pub fn new(
        task: SessionTask,
        reading_text: Option<String>,
        created_at: i64,
    ) -> Result<Self, StoreError> {
        let session = Self {
            id: new_session_id(),
            created_at,
            task,
            reading_text,
            state: SessionState::Recording,
            error: None,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if !valid_id(&self.id) {
            return Err(StoreError::InvalidSession(format!("bad id {:?}", self.id)));
        }
        match (self.task, &self.reading_text) {
            (SessionTask::Reading, Some(text)) if !text.trim().is_empty() => Ok(()),
            (SessionTask::Reading, _) => Err(StoreError::InvalidSession(
                "reading task needs reading text".into(),
            )),
            (SessionTask::Conversation, None) => Ok(()),
            (SessionTask::Conversation, Some(_)) => Err(StoreError::InvalidSession(
                "conversation task takes no reading text".into(),
            )),
        }
    }

    /// Moves along recording → processing → (analyzed | failed). A recording
    /// that cannot be decoded fails straight from `recording`.
    pub fn transition(&mut self, to: SessionState) -> Result<(), StoreError> {
        use SessionState::*;
        let ok = matches!(
            (self.state, to),
            (Recording, Processing)
                | (Recording, Failed)
                | (Processing, Analyzed)
                | (Processing, Failed)
        );
        if !ok {
            return Err(StoreError::InvalidTransition {
                id: self.id.clone(),
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Artifact {
    Audio,
    Features,
    Analysis,
    SpeakerModel,
    TherapistEnrollment,
    ClientEnrollment,
}

impl Artifact {
    pub const ALL: [Artifact; 6] = [
        Artifact::Audio,
        Artifact::Features,
        Artifact::Analysis,
        Artifact::SpeakerModel,
        Artifact::TherapistEnrollment,
        Artifact::ClientEnrollment,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Audio => "audio.wav",
            Artifact::Features => "features.bin",
            Artifact::Analysis => "analysis.json",
            Artifact::SpeakerModel => "speaker.model",
            Artifact::TherapistEnrollment => "enrollment_therapist.json",
            Artifact::ClientEnrollment => "enrollment_client.json",
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub fnv1a64: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub session: Session,
    /// Keyed by file name.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub created_at: i64,
    pub task: SessionTask,
    pub state: SessionState,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            created_at: s.created_at,
            task: s.task,
            state: s.state,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Index {
    sessions: BTreeMap<String, SessionSummary>,
}

/// Conjunctive filter for [`Store::list_sessions`]; `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct SessionFilter {
    pub task: Option<SessionTask>,
    pub state: Option<SessionState>,
    /// Inclusive lower bound on `created_at`.
    pub from_ms: Option<i64>,
    /// Exclusive upper bound on `created_at`.
    pub to_ms: Option<i64>,
}

impl SessionFilter {
    fn matches(&self, s: &SessionSummary) -> bool {
        self.task.is_none_or(|t| t == s.task)
            && self.state.is_none_or(|st| st == s.state)
            && self.from_ms.is_none_or(|from| s.created_at >= from)
            && self.to_ms.is_none_or(|to| s.created_at < to)
    }
}

/// Steps of a save at which a fault can be injected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultPoint {
    /// Part of an artifact's temporary file has been written.
    ArtifactPartial(Artifact),
    ArtifactWritten(Artifact),
    ManifestWritten,
    IndexWritten,
}

/// Hook for crash-safety testing: returning an error aborts the save at
/// that point, leaving the disk as a crash would.
pub trait FaultInjector: Send + Sync {
    fn check(&self, point: &FaultPoint) -> io::Result<()>;
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RepairReport {
    pub restored: Vec<String>,
    pub unreadable: Vec<String>,
    pub removed_temp_files: usize,
    pub removed_locks: usize,
}

pub struct Store {
    sessions_dir: PathBuf,
    index_lock: Mutex<()>,
    faults: Option<Arc<dyn FaultInjector>>,
}

struct WriterLock {
    path: PathBuf,
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    mut midway: impl FnMut() -> io::Result<()>,
) -> io::Result<()> {
    let tmp = dir.join(format!("{TMP_PREFIX}{name}-{:016x}", rand::random::<u64>()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        let half = bytes.len() / 2;
        f.write_all(&bytes[..half])?;
        midway()?;
        f.write_all(&bytes[half..])?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(name))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn no_fault() -> io::Result<()> {
    Ok(())
}

impl Store {
    /// Opens (creating if needed) a store rooted at `data_dir`.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let sessions_dir = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&sessions_dir)?;
        Ok(Self {
            sessions_dir,
            index_lock: Mutex::new(()),
            faults: None,
        })
    }

    pub fn with_fault_injector(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    pub fn sessions_dir(&self) -> &Path {
        &self.sessions_dir
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.sessions_dir.join(id)
    }

    fn fault(&self, point: FaultPoint) -> io::Result<()> {
        match &self.faults {
            Some(f) => f.check(&point),
            None => Ok(()),
        }
    }

    fn read_index(&self) -> Result<Index, StoreError> {
        match fs::read(self.sessions_dir.join(INDEX_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Io(io::Error::new(io::ErrorKind::InvalidData, e))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Index::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn update_index(&self, f: impl FnOnce(&mut Index)) -> Result<(), StoreError> {
        let _guard = self.index_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut index = self.read_index()?;
        f(&mut index);
        let bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        write_atomic(&self.sessions_dir, INDEX_FILE, &bytes, no_fault)?;
        Ok(())
    }

    fn read_manifest(&self, id: &str) -> Result<Option<Manifest>, StoreError> {
        match fs::read(self.session_dir(id).join(MANIFEST_FILE)) {
            Ok(bytes) => {
                serde_json::from_slice(&bytes)
                    .map(Some)
                    .map_err(|_| StoreError::CorruptArtifact {
                        id: id.to_string(),
                        artifact: MANIFEST_FILE.to_string(),
                    })
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn acquire(&self, id: &str) -> Result<WriterLock, StoreError> {
        let dir = self.session_dir(id);
        fs::create_dir_all(&dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WriterLock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::WriteConflict(id.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Writes `session` together with `artifacts`, then updates the index.
    ///
    /// Artifacts already stored for the session are kept; re-saving one with
    /// different content is a [`StoreError::WriteConflict`].
    pub fn save_session(
        &self,
        session: &Session,
        artifacts: &[(Artifact, &[u8])],
    ) -> Result<(), StoreError> {
        session.validate()?;
        let _lock = self.acquire(&session.id)?;
        let dir = self.session_dir(&session.id);
        let mut entries = self
            .read_manifest(&session.id)?
            .map(|m| m.artifacts)
            .unwrap_or_default();
        for &(artifact, bytes) in artifacts {
            let entry = ArtifactEntry {
                fnv1a64: checksum(bytes),
                bytes: bytes.len() as u64,
            };
            match entries.get(artifact.file_name()) {
                Some(existing) if *existing == entry => continue,
                Some(_) => return Err(StoreError::WriteConflict(session.id.clone())),
                None => {}
            }
            write_atomic(&dir, artifact.file_name(), bytes, || {
                self.fault(FaultPoint::ArtifactPartial(artifact))
            })?;
            self.fault(FaultPoint::ArtifactWritten(artifact))?;
            entries.insert(artifact.file_name().to_string(), entry);
        }
        let manifest = Manifest {
            session: session.clone(),
            artifacts: entries,
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir, MANIFEST_FILE, &bytes, no_fault)?;
        self.fault(FaultPoint::ManifestWritten)?;
        self.update_index(|index| {
            index
                .sessions
                .insert(session.id.clone(), SessionSummary::from(session));
        })?;
        self.fault(FaultPoint::IndexWritten)?;
        Ok(())
    }

    /// Loads a listed session and verifies every artifact checksum.
    pub fn load_session(&self, id: &str) -> Result<LoadedSession, StoreError> {
        if !valid_id(id) || !self.read_index()?.sessions.contains_key(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let manifest = self
            .read_manifest(id)?
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let loaded = LoadedSession {
            dir: self.session_dir(id),
            manifest,
        };
        for artifact in Artifact::ALL {
            loaded.read(artifact)?;
        }
        Ok(loaded)
    }

    /// Summaries sorted by `created_at` descending, ties by id ascending.
    pub fn list_sessions(&self, filter: &SessionFilter) -> Result<Vec<SessionSummary>, StoreError> {
        let mut out: Vec<SessionSummary> = self
            .read_index()?
            .sessions
            .into_values()
            .filter(|s| filter.matches(s))
            .collect();
        out.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| a.id.cmp(&b.id))
        });
        Ok(out)
    }

    /// Startup recovery: drops temporary files and stale writer locks, and
    /// re-indexes fully written sessions missing from the index. Must not
    /// run concurrently with writers.
    pub fn repair(&self) -> Result<RepairReport, StoreError> {
        let mut report = RepairReport::default();
        for entry in fs::read_dir(&self.sessions_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with(TMP_PREFIX) {
                fs::remove_file(entry.path())?;
                report.removed_temp_files += 1;
                continue;
            }
            if !entry.file_type()?.is_dir() || !valid_id(&name) {
                continue;
            }
            for file in fs::read_dir(entry.path())? {
                let file = file?;
                let fname = file.file_name().to_string_lossy().into_owned();
                if fname.starts_with(TMP_PREFIX) {
                    fs::remove_file(file.path())?;
                    report.removed_temp_files += 1;
                } else if fname == LOCK_FILE {
                    fs::remove_file(file.path())?;
                    report.removed_locks += 1;
                }
            }
            let manifest = match self.read_manifest(&name) {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(_) => {
                    report.unreadable.push(name);
                    continue;
                }
            };
            let loaded = LoadedSession {
                dir: entry.path(),
                manifest,
            };
            if Artifact::ALL.iter().any(|&a| loaded.read(a).is_err()) {
                report.unreadable.push(name);
                continue;
            }
            let summary = SessionSummary::from(&loaded.manifest.session);
            let index = self.read_index()?;
            if index.sessions.get(&name) != Some(&summary) {
                self.update_index(|index| {
                    index.sessions.insert(name.clone(), summary);
                })?;
                report.restored.push(name);
            }
        }
        report.restored.sort();
        report.unreadable.sort();
        Ok(report)
    }
}

/// A session whose manifest and artifact checksums have been verified.
/// Artifacts are parsed on demand.
#[derive(Debug, Clone)]
pub struct LoadedSession {
    dir: PathBuf,
    manifest: Manifest,
}

impl LoadedSession {
    pub fn session(&self) -> &Session {
        &self.manifest.session
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn has(&self, artifact: Artifact) -> bool {
        self.manifest.artifacts.contains_key(artifact.file_name())
    }

    /// Raw artifact bytes, checksum-verified; `None` if never stored.
    pub fn read(&self, artifact: Artifact) -> Result<Option<Vec<u8>>, StoreError> {
        let Some(entry) = self.manifest.artifacts.get(artifact.file_name()) else {
            return Ok(None);
        };
        let corrupt = || StoreError::CorruptArtifact {
            id: self.manifest.session.id.clone(),
            artifact: artifact.file_name().to_string(),
        };
        let bytes = match fs::read(self.dir.join(artifact.file_name())) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(corrupt()),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() as u64 != entry.bytes || checksum(&bytes) != entry.fnv1a64 {
            return Err(corrupt());
        }
        Ok(Some(bytes))
    }

    fn parse<T, E>(
        &self,
        artifact: Artifact,
        parse: impl FnOnce(&[u8]) -> Result<T, E>,
    ) -> Result<Option<T>, StoreError> {
        self.read(artifact)?
            .map(|bytes| {
                parse(&bytes).map_err(|_| StoreError::CorruptArtifact {
                    id: self.manifest.session.id.clone(),
                    artifact: artifact.file_name().to_string(),
                })
            })
            .transpose()
    }

    pub fn audio(&self) -> Result<Option<AudioClip>, StoreError> {
        let id = self.manifest.session.id.clone();
        self.parse(Artifact::Audio, decode_recording)
            .map(|clip| clip.map(|c| c.with_source_id(id)))
    }

    pub fn features(&self) -> Result<Option<FeatureMatrix>, StoreError> {
        self.parse(Artifact::Features, FeatureMatrix::from_bytes)
    }

    pub fn bundle(&self) -> Result<Option<AnalysisBundle>, StoreError> {
        self.parse(Artifact::Analysis, AnalysisBundle::from_json)
    }

    pub fn speaker_model(&self) -> Result<Option<SpeakerModel>, StoreError> {
        self.parse(Artifact::SpeakerModel, SpeakerModel::from_bytes)
    }

    pub fn enrollment(&self, artifact: Artifact) -> Result<Option<EnrollmentSet>, StoreError> {
        self.parse(artifact, |b| serde_json::from_slice::<EnrollmentSet>(b))
    }
}
