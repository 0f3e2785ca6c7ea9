//! JSON-lines utterance manifests with train/test splits.
//!
//! One object per line:
//! `{"id", "audio_path", "source_lang", "ref_transcript", "ref_translation_en", "split"}`.
//! Audio paths are relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: invalid split {split:?} (expected train or test)")]
    InvalidSplit {
        path: PathBuf,
        line: usize,
        split: String,
    },
    #[error("{path}:{line}: duplicate utterance id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("invalid split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: PathBuf,
    pub source_lang: String,
    pub ref_transcript: String,
    pub ref_translation_en: String,
    pub split: Split,
}

impl ManifestEntry {
    /// Audio path resolved against the manifest directory.
    pub fn resolve_audio(&self, manifest_dir: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            manifest_dir.join(&self.audio_path)
        }
    }
}

/// Entry as it appears on disk, with the split left as free text so an
/// invalid value gets its own error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    audio_path: PathBuf,
    source_lang: String,
    ref_transcript: String,
    ref_translation_en: String,
    split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Entries whose audio file could not be found.
    pub warnings: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let file = fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let split = raw.split.parse().map_err(|_| ManifestError::InvalidSplit {
            path: path.to_path_buf(),
            line: lineno,
            split: raw.split.clone(),
        })?;
        if !ids.insert(raw.id.clone()) {
            return Err(ManifestError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: raw.id,
            });
        }
        let entry = ManifestEntry {
            id: raw.id,
            audio_path: raw.audio_path,
            source_lang: raw.source_lang,
            ref_transcript: raw.ref_transcript,
            ref_translation_en: raw.ref_translation_en,
            split,
        };
        if !entry.resolve_audio(dir).is_file() {
            warnings.push(format!(
                "line {lineno}: audio for {} not found at {}",
                entry.id,
                entry.resolve_audio(dir).display()
            ));
        }
        entries.push(entry);
    }
    Ok(Manifest { entries, warnings })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Entries of one split, in manifest order.
pub fn split(entries: &[ManifestEntry], which: Split) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| e.split == which)
        .cloned()
        .collect()
}
