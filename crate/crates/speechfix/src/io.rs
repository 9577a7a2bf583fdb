//! On-disk formats: line-delimited JSON manifests and records, JSON track
//! files, plain-text sentences.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use speechfix_core::dataset::{FgesManifest, FgesSample, RawSample, SplitRatios};
use speechfix_core::SpeechTrack;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}:{line}: sample {id}: {reason}", path.display())]
    InvariantViolation {
        path: PathBuf,
        line: usize,
        id: String,
        reason: String,
    },
    #[error("{}:{line}: duplicate sample id {id}", path.display())]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

impl IoError {
    /// Whether the input was readable but semantically inconsistent.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            IoError::InvariantViolation { .. } | IoError::DuplicateId { .. }
        )
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| IoError::io(path, e))
}

/// Parses one JSON value per non-blank line, keeping 1-based line numbers.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<(usize, T)>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| IoError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    Ok(parse_jsonl(&read_text(path)?, path)?
        .into_iter()
        .map(|(_, v)| v)
        .collect())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out += &serde_json::to_string(item).expect("record serializes");
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    write_text(path, &to_jsonl(items))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Parses manifest text. Records are checked in order; the first failure
/// is reported with its line number.
pub fn parse_manifest(text: &str, path: &Path, ratios: SplitRatios) -> Result<FgesManifest, IoError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (line, raw) in parse_jsonl::<RawSample>(text, path)? {
        let id = raw.id.clone();
        let sample = FgesSample::try_from(raw).map_err(|e| IoError::InvariantViolation {
            path: path.to_path_buf(),
            line,
            id: id.clone(),
            reason: match e {
                speechfix_core::dataset::DatasetError::InvariantViolation { reason, .. } => reason,
                other => other.to_string(),
            },
        })?;
        if !seen.insert(id.clone()) {
            return Err(IoError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        samples.push(sample);
    }
    FgesManifest::new(samples, ratios).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<FgesManifest, IoError> {
    parse_manifest(&read_text(path)?, path, SplitRatios::default())
}

pub fn manifest_to_string(manifest: &FgesManifest) -> String {
    to_jsonl(&manifest.samples)
}

pub fn save_manifest(path: &Path, manifest: &FgesManifest) -> Result<(), IoError> {
    write_text(path, &manifest_to_string(manifest))
}

pub fn load_track(path: &Path) -> Result<SpeechTrack, IoError> {
    read_json(path)
}

pub fn save_track(path: &Path, track: &SpeechTrack) -> Result<(), IoError> {
    let mut s = serde_json::to_string(track).expect("track serializes");
    s.push('\n');
    write_text(path, &s)
}

/// Resolves a manifest's `track_path` against the manifest's directory.
pub fn resolve_track_path(manifest_path: &Path, track_path: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(track_path)
}
