//! Versioned, content-addressed artifact store standing in for a PACS.
//!
//! Layout under the root directory:
//!
//! ```text
//! cases/<case_id>/index.json
//! cases/<case_id>/<stage>/<kind>/<version>_<hash8>.<ext>
//! ```
//!
//! Writers on one case are serialized with an advisory lock on
//! `cases/<case_id>/.lock`; every file is written to a temporary name and
//! renamed into place, so readers only ever see complete files.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use crate::planning::Stage;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid case id {0:?}")]
    InvalidCaseId(String),
    #[error("case {0} not found")]
    UnknownCase(String),
    #[error("case {0} already exists")]
    CaseExists(String),
    #[error("artifact {0} not found")]
    MissingArtifact(String),
    #[error("artifact {path} is corrupt: expected hash {expected}, found {found}")]
    Corrupt { path: String, expected: String, found: String },
    #[error("index of case {case} is unreadable: {reason}")]
    BadIndex { case: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ArtifactKind {
    Volume,
    Labels,
    Device,
    Transform,
    Plan,
    Dose,
    Report,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 7] = [
        ArtifactKind::Volume,
        ArtifactKind::Labels,
        ArtifactKind::Device,
        ArtifactKind::Transform,
        ArtifactKind::Plan,
        ArtifactKind::Dose,
        ArtifactKind::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Volume => "VOLUME",
            ArtifactKind::Labels => "LABELS",
            ArtifactKind::Device => "DEVICE",
            ArtifactKind::Transform => "TRANSFORM",
            ArtifactKind::Plan => "PLAN",
            ArtifactKind::Dose => "DOSE",
            ArtifactKind::Report => "REPORT",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ArtifactKind::Volume | ArtifactKind::Labels | ArtifactKind::Dose => "svol",
            ArtifactKind::Device => "stl",
            ArtifactKind::Transform | ArtifactKind::Plan | ArtifactKind::Report => "json",
        }
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub case_id: String,
    pub stage: Stage,
    pub kind: ArtifactKind,
    pub version: u32,
    /// Hex SHA-256 of the stored bytes.
    pub hash: String,
    /// Path relative to the case directory.
    pub filename: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
    pub stages: BTreeMap<Stage, Vec<ArtifactRef>>,
}

impl CaseRecord {
    pub fn artifacts(&self, stage: Stage, kind: ArtifactKind) -> impl Iterator<Item = &ArtifactRef> {
        self.stages.get(&stage).into_iter().flatten().filter(move |r| r.kind == kind)
    }

    pub fn latest(&self, stage: Stage, kind: ArtifactKind) -> Option<&ArtifactRef> {
        self.artifacts(stage, kind).max_by_key(|r| r.version)
    }
}

/// Source of index timestamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    fn now(self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Overlay {
    Complete { volume: ArtifactRef, device: ArtifactRef, transform: ArtifactRef },
    Incomplete { missing: Vec<String> },
}

impl Overlay {
    pub fn refs(&self) -> Vec<&ArtifactRef> {
        match self {
            Overlay::Complete { volume, device, transform } => vec![volume, device, transform],
            Overlay::Incomplete { .. } => Vec::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Case ids name directories: ASCII letters, digits, `-`, `_` and `.`,
/// not starting with `.`, at most 128 characters.
pub fn valid_case_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.')
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), ArchiveError> {
    let dir = path.parent().expect("artifact paths have a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{}",
        path.file_name().unwrap().to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct Archive {
    root: PathBuf,
    clock: Clock,
}

/// Exclusive per-case writer lock, released on drop.
pub struct CaseLock {
    _file: File,
}

impl Archive {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ArchiveError> {
        Self::open_with_clock(root, Clock::System)
    }

    pub fn open_with_clock(root: impl Into<PathBuf>, clock: Clock) -> Result<Self, ArchiveError> {
        let root = root.into();
        let cases = root.join("cases");
        fs::create_dir_all(&cases).map_err(io_err(&cases))?;
        Ok(Archive { root, clock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn case_dir(&self, case_id: &str) -> Result<PathBuf, ArchiveError> {
        if !valid_case_id(case_id) {
            return Err(ArchiveError::InvalidCaseId(case_id.into()));
        }
        Ok(self.root.join("cases").join(case_id))
    }

    fn index_path(&self, case_id: &str) -> Result<PathBuf, ArchiveError> {
        Ok(self.case_dir(case_id)?.join("index.json"))
    }

    /// Blocks until this process holds the case's writer lock.
    pub fn lock_case(&self, case_id: &str) -> Result<CaseLock, ArchiveError> {
        let dir = self.case_dir(case_id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(CaseLock { _file: file })
    }

    pub fn case_ids(&self) -> Result<Vec<String>, ArchiveError> {
        let cases = self.root.join("cases");
        let mut out = Vec::new();
        for entry in fs::read_dir(&cases).map_err(io_err(&cases))? {
            let entry = entry.map_err(io_err(&cases))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_case_id(&name) && entry.path().join("index.json").is_file() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn case(&self, case_id: &str) -> Result<CaseRecord, ArchiveError> {
        let path = self.index_path(case_id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ArchiveError::UnknownCase(case_id.into())),
            Err(e) => return Err(ArchiveError::Io { path, source: e }),
        };
        serde_json::from_slice(&bytes).map_err(|e| ArchiveError::BadIndex { case: case_id.into(), reason: e.to_string() })
    }

    pub fn has_case(&self, case_id: &str) -> bool {
        self.index_path(case_id).map(|p| p.is_file()).unwrap_or(false)
    }

    fn write_index(&self, record: &CaseRecord) -> Result<(), ArchiveError> {
        let json = serde_json::to_vec_pretty(record).expect("index serializes");
        atomic_write(&self.index_path(&record.case_id)?, &json)
    }

    /// Creates an empty case; fails if it already exists.
    pub fn create_case(&self, case_id: &str) -> Result<CaseRecord, ArchiveError> {
        let _lock = self.lock_case(case_id)?;
        if self.has_case(case_id) {
            return Err(ArchiveError::CaseExists(case_id.into()));
        }
        let now = self.clock.now();
        let record = CaseRecord { case_id: case_id.into(), created: now, modified: now, stages: BTreeMap::new() };
        self.write_index(&record)?;
        Ok(record)
    }

    /// Stores bytes as the next version of (case, stage, kind); bytes already
    /// stored in that slot return the existing reference. Creates the case
    /// if needed.
    pub fn store(&self, case_id: &str, stage: Stage, kind: ArtifactKind, bytes: &[u8]) -> Result<ArtifactRef, ArchiveError> {
        let _lock = self.lock_case(case_id)?;
        let mut record = match self.case(case_id) {
            Ok(r) => r,
            Err(ArchiveError::UnknownCase(_)) => {
                let now = self.clock.now();
                CaseRecord { case_id: case_id.into(), created: now, modified: now, stages: BTreeMap::new() }
            }
            Err(e) => return Err(e),
        };
        let hash = sha256_hex(bytes);
        if let Some(existing) = record.artifacts(stage, kind).find(|r| r.hash == hash) {
            return Ok(existing.clone());
        }
        let version = record.artifacts(stage, kind).count() as u32 + 1;
        let filename = format!("{}/{}/{}_{}.{}", stage.as_str(), kind.as_str(), version, &hash[..8], kind.extension());
        atomic_write(&self.case_dir(case_id)?.join(&filename), bytes)?;
        let r = ArtifactRef { case_id: case_id.into(), stage, kind, version, hash, filename };
        record.stages.entry(stage).or_default().push(r.clone());
        record.modified = self.clock.now();
        self.write_index(&record)?;
        Ok(r)
    }

    /// Reads an artifact and verifies its hash.
    pub fn fetch(&self, r: &ArtifactRef) -> Result<Vec<u8>, ArchiveError> {
        if r.filename.split('/').any(|part| part == ".." || part.is_empty()) {
            return Err(ArchiveError::MissingArtifact(r.filename.clone()));
        }
        let path = self.case_dir(&r.case_id)?.join(&r.filename);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ArchiveError::MissingArtifact(format!("{}/{}", r.case_id, r.filename)))
            }
            Err(e) => return Err(ArchiveError::Io { path, source: e }),
        };
        let found = sha256_hex(&bytes);
        if found != r.hash {
            return Err(ArchiveError::Corrupt { path: format!("{}/{}", r.case_id, r.filename), expected: r.hash.clone(), found });
        }
        Ok(bytes)
    }

    pub fn latest(&self, case_id: &str, stage: Stage, kind: ArtifactKind) -> Result<Option<ArtifactRef>, ArchiveError> {
        Ok(self.case(case_id)?.latest(stage, kind).cloned())
    }

    /// Latest artifact of `kind` from the most advanced stage that has one.
    pub fn latest_any_stage(&self, case_id: &str, kind: ArtifactKind) -> Result<Option<ArtifactRef>, ArchiveError> {
        let record = self.case(case_id)?;
        Ok([Stage::Post, Stage::Intra, Stage::Pre].into_iter().find_map(|s| record.latest(s, kind).cloned()))
    }

    /// Latest POST volume with the latest device model and registration.
    pub fn followup_overlay(&self, case_id: &str) -> Result<Overlay, ArchiveError> {
        let volume = self.latest(case_id, Stage::Post, ArtifactKind::Volume)?;
        let device = self.latest_any_stage(case_id, ArtifactKind::Device)?;
        let transform = self.latest_any_stage(case_id, ArtifactKind::Transform)?;
        Ok(match (volume, device, transform) {
            (Some(volume), Some(device), Some(transform)) => Overlay::Complete { volume, device, transform },
            (v, d, t) => {
                let mut missing = Vec::new();
                if v.is_none() {
                    missing.push("VOLUME@POST".into());
                }
                if d.is_none() {
                    missing.push("DEVICE".into());
                }
                if t.is_none() {
                    missing.push("TRANSFORM".into());
                }
                Overlay::Incomplete { missing }
            }
        })
    }

    /// Reads a sidecar file kept next to the index (not versioned).
    pub fn read_meta(&self, case_id: &str, name: &str) -> Result<Option<Vec<u8>>, ArchiveError> {
        let path = self.case_dir(case_id)?.join(name);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ArchiveError::Io { path, source: e }),
        }
    }

    /// Atomically replaces a sidecar file; the caller holds the case lock.
    pub fn write_meta(&self, case_id: &str, name: &str, bytes: &[u8]) -> Result<(), ArchiveError> {
        if name.contains('/') || name.starts_with('.') || name == "index.json" {
            return Err(ArchiveError::MissingArtifact(name.into()));
        }
        atomic_write(&self.case_dir(case_id)?.join(name), bytes)
    }
}
