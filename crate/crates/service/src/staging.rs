//! Chunks of a live recording, kept on disk until the recording stops.
//!
//! Each chunk is stored canonicalized (16 kHz mono PCM16) as
//! `<dir>/<session id>/chunk-000000.wav`, written under a temporary name and
//! renamed, so a crash never leaves a half-written chunk behind under its
//! final name.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use stutter_core::audio::{decode_recording, encode_wav, AudioClip, CANONICAL_RATE};

pub struct Staging {
    dir: PathBuf,
}

fn chunk_name(n: usize) -> String {
    format!("chunk-{n:06}.wav")
}

fn is_chunk(name: &str) -> bool {
    name.starts_with("chunk-") && name.ends_with(".wav")
}

impl Staging {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    fn chunk_paths(&self, id: &str) -> io::Result<Vec<PathBuf>> {
        let dir = self.session_dir(id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry?;
            if is_chunk(&entry.file_name().to_string_lossy()) {
                paths.push(entry.path());
            }
        }
        paths.sort();
        Ok(paths)
    }

    /// Appends a canonical clip and returns the number of staged chunks.
    /// Callers serialize appends per session.
    pub fn append(&self, id: &str, clip: &AudioClip) -> io::Result<usize> {
        assert_eq!(
            clip.sample_rate(),
            CANONICAL_RATE,
            "chunks are staged canonical"
        );
        let dir = self.session_dir(id);
        fs::create_dir_all(&dir)?;
        let n = self.chunk_paths(id)?.len();
        let tmp = dir.join(format!(".tmp-{}", chunk_name(n)));
        fs::write(&tmp, encode_wav(clip))?;
        fs::rename(&tmp, dir.join(chunk_name(n)))?;
        Ok(n + 1)
    }

    /// Staged chunks joined in order, or `None` if nothing was staged.
    pub fn assemble(&self, id: &str) -> io::Result<Option<AudioClip>> {
        let paths = self.chunk_paths(id)?;
        if paths.is_empty() {
            return Ok(None);
        }
        let mut samples = Vec::new();
        for path in &paths {
            let clip = decode_recording(&fs::read(path)?).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: {e}", path.display()),
                )
            })?;
            samples.extend_from_slice(clip.samples());
        }
        Ok(Some(AudioClip::new(samples, CANONICAL_RATE, id)))
    }

    /// Total staged duration in seconds.
    pub fn staged_s(&self, id: &str) -> io::Result<f64> {
        Ok(self.assemble(id)?.map_or(0.0, |clip| clip.duration_s()))
    }

    pub fn discard(&self, id: &str) -> io::Result<()> {
        match fs::remove_dir_all(self.session_dir(id)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Session ids that have a staging directory.
    pub fn sessions(&self) -> io::Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
