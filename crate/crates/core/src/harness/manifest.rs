//! Line-delimited JSON manifests.
//!
//! The first non-empty line is a header naming the dataset kind and, for
//! synthetic sets, the ordered label names:
//!
//! ```text
//! {"kind":"iemocap4"}
//! {"id":"Ses01F_impro01_F000","audio":"feats/Ses01F_impro01_F000.emq","transcript":"...","speaker":"Ses01F","label":"neutral"}
//! ```
//!
//! Record fields: `id`, `audio` (feature-file path relative to the manifest,
//! or a `synthetic:` descriptor), `transcript`, and the optional `speaker`,
//! `label`, `dialogue` and `split`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::AudioRef;
use crate::error::{EmoqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Iemocap4,
    Meld4,
    Meld7,
    Synthetic,
}

impl DatasetKind {
    /// Canonical class list; `None` for synthetic sets, whose header names them.
    pub fn default_labels(self) -> Option<Vec<String>> {
        let names: &[&str] = match self {
            DatasetKind::Iemocap4 => &["neutral", "angry", "sadness", "happy"],
            DatasetKind::Meld4 => &["neutral", "angry", "sadness", "joy"],
            DatasetKind::Meld7 => &["neutral", "angry", "sadness", "joy", "surprise", "disgust", "fear"],
            DatasetKind::Synthetic => return None,
        };
        Some(names.iter().map(|s| s.to_string()).collect())
    }

    /// Map corpus label spellings onto the canonical class names.
    fn normalize_label(self, raw: &str) -> String {
        let lower = raw.trim().to_lowercase();
        let canonical = match (self, lower.as_str()) {
            (DatasetKind::Iemocap4, "excited" | "exc" | "hap" | "happiness") => "happy",
            (DatasetKind::Meld4 | DatasetKind::Meld7, "happy" | "happiness") => "joy",
            (DatasetKind::Synthetic, _) => return raw.trim().to_string(),
            (_, "neu") => "neutral",
            (_, "ang" | "anger") => "angry",
            (_, "sad") => "sadness",
            (_, other) => other,
        };
        canonical.to_string()
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Iemocap4 => "iemocap4",
            DatasetKind::Meld4 => "meld4",
            DatasetKind::Meld7 => "meld7",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| EmoqError::Data(format!("unknown dataset kind `{s}`")))
    }
}

/// One utterance with its resolved label index.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio: AudioRef,
    pub transcript: String,
    pub speaker: Option<String>,
    pub label: Option<usize>,
    pub dialogue_id: Option<String>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub labels: Vec<String>,
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative audio paths resolve against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    audio: String,
    transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dialogue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Records whose split tag equals `split`.
    pub fn split(&self, split: &str) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split.as_deref() == Some(split)).collect()
    }

    /// Copy restricted to the given record indices.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    /// Copy restricted to one split tag.
    pub fn split_manifest(&self, split: &str) -> DatasetManifest {
        DatasetManifest {
            records: self.split(split).into_iter().cloned().collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> DatasetManifest {
        DatasetManifest {
            kind: self.kind,
            labels: self.labels.clone(),
            records: Vec::new(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Audio reference of record `i` with relative paths resolved.
    pub fn audio_ref(&self, i: usize) -> AudioRef {
        self.records[i].audio.resolved(self.base_dir.as_deref())
    }

    /// Serialize back to manifest text. Output is byte-deterministic.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            kind: self.kind,
            labels: match self.kind {
                DatasetKind::Synthetic => Some(self.labels.clone()),
                _ => None,
            },
        };
        let mut out = to_json(&header)?;
        out.push('\n');
        for r in &self.records {
            let raw = RawRecord {
                id: r.id.clone(),
                audio: r.audio.to_string(),
                transcript: Some(r.transcript.clone()),
                speaker: r.speaker.clone(),
                label: r.label.map(|l| self.labels[l].clone()),
                dialogue: r.dialogue_id.clone(),
                split: r.split.clone(),
            };
            out.push_str(&to_json(&raw)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| EmoqError::io(path, e))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| EmoqError::Data(format!("manifest serialization: {e}")))
}

/// Parse manifest text. `base_dir` anchors relative audio paths.
pub fn parse_manifest(text: &str, base_dir: Option<&Path>) -> Result<DatasetManifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| EmoqError::Data("manifest is empty: expected a header line".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| EmoqError::Data(format!("manifest line 1: bad header: {e}")))?;
    let labels = match (header.kind.default_labels(), header.labels) {
        (Some(defaults), None) => defaults,
        (Some(defaults), Some(given)) if given == defaults => defaults,
        (Some(defaults), Some(given)) => {
            return Err(EmoqError::Data(format!(
                "{} manifests use labels {defaults:?}, header lists {given:?}",
                header.kind
            )))
        }
        (None, Some(given)) if !given.is_empty() => given,
        (None, _) => return Err(EmoqError::Data("synthetic manifest header must list labels".into())),
    };
    let distinct: BTreeSet<&String> = labels.iter().collect();
    if distinct.len() != labels.len() {
        return Err(EmoqError::Data(format!("duplicate label names in {labels:?}")));
    }

    let mut ids = BTreeSet::new();
    let mut records = Vec::new();
    for (line_no, line) in lines {
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| EmoqError::Data(format!("manifest line {line_no}: {e}")))?;
        if !ids.insert(raw.id.clone()) {
            return Err(EmoqError::Data(format!("manifest line {line_no}: duplicate id `{}`", raw.id)));
        }
        let transcript = raw
            .transcript
            .ok_or_else(|| EmoqError::Data(format!("manifest line {line_no}: record `{}` has no transcript", raw.id)))?;
        let label = match raw.label {
            None => None,
            Some(name) => {
                let canonical = header.kind.normalize_label(&name);
                let idx = labels.iter().position(|l| *l == canonical).ok_or_else(|| {
                    EmoqError::Data(format!(
                        "manifest line {line_no}: unknown label `{name}` for {} (classes {labels:?})",
                        header.kind
                    ))
                })?;
                Some(idx)
            }
        };
        let audio: AudioRef = raw
            .audio
            .parse()
            .map_err(|e| EmoqError::Data(format!("manifest line {line_no}: {e}")))?;
        records.push(UtteranceRecord {
            id: raw.id,
            audio,
            transcript,
            speaker: raw.speaker,
            label,
            dialogue_id: raw.dialogue,
            split: raw.split,
        });
    }
    Ok(DatasetManifest {
        kind: header.kind,
        labels,
        records,
        base_dir: base_dir.map(Path::to_path_buf),
    })
}

/// Read and validate a manifest file; relative audio paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| EmoqError::io(path, e))?;
    parse_manifest(&text, path.parent())
}

pub const MELD_SPLIT_SIZES: [(&str, usize); 3] = [("train", 9989), ("dev", 1109), ("test", 2610)];

/// Check the full seven-class MELD split sizes; any mismatch is an error.
pub fn validate_meld_splits(manifest: &DatasetManifest) -> Result<()> {
    if manifest.kind != DatasetKind::Meld7 {
        return Err(EmoqError::Data(format!(
            "split-size validation applies to meld7 manifests, not {}",
            manifest.kind
        )));
    }
    let mut problems = Vec::new();
    for (split, expected) in MELD_SPLIT_SIZES {
        let got = manifest.split(split).len();
        if got != expected {
            problems.push(format!("{split}: expected {expected}, found {got}"));
        }
    }
    let untagged = manifest
        .records
        .iter()
        .filter(|r| !MELD_SPLIT_SIZES.iter().any(|(s, _)| r.split.as_deref() == Some(s)))
        .count();
    if untagged > 0 {
        problems.push(format!("{untagged} records outside train/dev/test"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(EmoqError::Data(format!("MELD split sizes do not validate: {}", problems.join("; "))))
    }
}
