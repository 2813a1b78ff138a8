//! Synthetic datasets whose label needs both modalities.
//!
//! Every utterance carries an audio cue `a` (a mean shift on a subset of
//! feature dimensions) and a text cue `b` (a colour word in the transcript),
//! both in `0..C`, with label `(a + b) mod C`. Within each class the audio
//! cue cycles through all values, so on its own either cue says nothing
//! about the label. For `C = 2` this is XOR.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetKind, DatasetManifest, UtteranceRecord};
use crate::encoders::{write_feature_file, AudioEncoderAdapter, AudioRef, FeatureRecord, SyntheticAudio};
use crate::error::{EmoqError, Result};

pub const SUPPORTED_CLASS_COUNTS: [usize; 3] = [2, 4, 7];

const CUE_WORDS: [&str; 7] = ["amber", "cobalt", "violet", "olive", "scarlet", "ivory", "indigo"];
const FILLER: [&str; 12] = [
    "the", "call", "came", "this", "morning", "again", "about", "that", "report", "we", "talked", "later",
];
const SPEAKERS: usize = 10;

/// Class names used for a synthetic set of `c` classes.
pub fn fixture_labels(c: usize) -> Vec<String> {
    let names: &[&str] = match c {
        2 => &["neutral", "angry"],
        4 => &["neutral", "angry", "sadness", "happy"],
        _ => &["neutral", "angry", "sadness", "joy", "surprise", "disgust", "fear"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub classes: usize,
    /// Per-class record counts tagged `train`.
    pub train_counts: Vec<usize>,
    /// Per-class record counts tagged `test`; may be empty.
    pub test_counts: Vec<usize>,
    pub seed: u64,
    /// Audio cue strength added to the cued feature dimensions.
    pub shift: f64,
    /// Inclusive duration range in milliseconds.
    pub duration_ms: (u64, u64),
}

impl FixtureSpec {
    /// Balanced set with `n_per_class` training records per class.
    pub fn balanced(n_per_class: usize, classes: usize, seed: u64) -> Self {
        Self {
            classes,
            train_counts: vec![n_per_class; classes],
            test_counts: Vec::new(),
            seed,
            shift: 1.0,
            duration_ms: (100, 300),
        }
    }

    /// Balanced train and test splits.
    pub fn split(train_per_class: usize, test_per_class: usize, classes: usize, seed: u64) -> Self {
        Self {
            test_counts: vec![test_per_class; classes],
            ..Self::balanced(train_per_class, classes, seed)
        }
    }
}

/// Generate a manifest of synthetic utterances with audio descriptors.
pub fn make_fixture(spec: &FixtureSpec) -> Result<DatasetManifest> {
    let c = spec.classes;
    if !SUPPORTED_CLASS_COUNTS.contains(&c) {
        return Err(EmoqError::Config(format!(
            "synthetic fixture supports {SUPPORTED_CLASS_COUNTS:?} classes, got {c}"
        )));
    }
    for counts in [&spec.train_counts, &spec.test_counts] {
        if !counts.is_empty() && counts.len() != c {
            return Err(EmoqError::Config(format!("{} per-class counts for {c} classes", counts.len())));
        }
    }
    let (lo, hi) = spec.duration_ms;
    if lo == 0 || hi < lo {
        return Err(EmoqError::Config(format!("bad duration range {lo}..={hi} ms")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for (split, counts) in [("train", &spec.train_counts), ("test", &spec.test_counts)] {
        let mut part = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for k in 0..n {
                let audio_cue = k % c;
                let text_cue = (label + c - audio_cue) % c;
                part.push((label, audio_cue, text_cue));
            }
        }
        part.shuffle(&mut rng);
        for (i, (label, audio_cue, text_cue)) in part.into_iter().enumerate() {
            let words: Vec<&str> = (0..3).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
            let slot = rng.random_range(0..=words.len());
            let mut transcript: Vec<&str> = words;
            transcript.insert(slot, CUE_WORDS[text_cue]);
            let audio = SyntheticAudio {
                seed: rng.random::<u32>().into(),
                duration_ms: rng.random_range(lo..=hi),
                cue: Some(audio_cue),
                levels: c,
                shift: spec.shift,
            };
            records.push(UtteranceRecord {
                id: format!("{split}{i:05}"),
                audio: AudioRef::Synthetic(audio),
                transcript: transcript.join(" "),
                speaker: Some(format!("S{:02}", i % SPEAKERS)),
                label: Some(label),
                dialogue_id: None,
                split: Some(split.to_string()),
            });
        }
    }
    Ok(DatasetManifest {
        kind: DatasetKind::Synthetic,
        labels: fixture_labels(c),
        records,
        base_dir: None,
    })
}

/// `n_per_class × C` training records.
pub fn make_synthetic_fixture(n_per_class: usize, classes: usize, seed: u64) -> Result<DatasetManifest> {
    make_fixture(&FixtureSpec::balanced(n_per_class, classes, seed))
}

/// Cue values `(audio, text)` of a fixture record, read back from the data.
pub fn record_cues(record: &UtteranceRecord) -> Option<(usize, usize)> {
    let AudioRef::Synthetic(audio) = &record.audio else {
        return None;
    };
    let text = record
        .transcript
        .split_whitespace()
        .find_map(|w| CUE_WORDS.iter().position(|c| *c == w))?;
    Some((audio.cue?, text))
}

/// Plug-in estimate of `I(X; Y)` in nats.
pub fn empirical_mutual_information(xs: &[usize], ys: &[usize]) -> f64 {
    let n = xs.len() as f64;
    let kx = xs.iter().max().map_or(0, |m| m + 1);
    let ky = ys.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![vec![0.0; ky]; kx];
    for (&x, &y) in xs.iter().zip(ys) {
        joint[x][y] += 1.0;
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let py: Vec<f64> = (0..ky).map(|y| joint.iter().map(|r| r[y]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for x in 0..kx {
        for y in 0..ky {
            let p = joint[x][y] / n;
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    mi
}

/// Encode every record into a feature file under `dir/features/` and return
/// a manifest pointing at them (paths relative to `dir`).
pub fn materialize_features(
    manifest: &DatasetManifest,
    encoder: &dyn AudioEncoderAdapter,
    dir: &Path,
) -> Result<DatasetManifest> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| EmoqError::io(&feat_dir, e))?;
    let mut out = manifest.clone();
    for (i, record) in out.records.iter_mut().enumerate() {
        let seq = encoder.encode(&manifest.audio_ref(i))?;
        let rel = PathBuf::from("features").join(format!("{}.emq", record.id));
        write_feature_file(
            &dir.join(&rel),
            &FeatureRecord {
                utterance_id: record.id.clone(),
                features: seq.data().clone(),
            },
        )?;
        record.audio = AudioRef::File(rel);
    }
    out.base_dir = Some(dir.to_path_buf());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let a = make_synthetic_fixture(50, 4, 7).unwrap();
        assert_eq!(a.records.len(), 200);
        let b = make_synthetic_fixture(50, 4, 7).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert_ne!(a, make_synthetic_fixture(50, 4, 8).unwrap());
        assert!(make_synthetic_fixture(5, 3, 0).is_err());
    }

    #[test]
    fn label_is_cue_sum_and_single_cues_are_uninformative() {
        for c in SUPPORTED_CLASS_COUNTS {
            let m = make_synthetic_fixture(14, c, 1).unwrap();
            let (mut labels, mut audio, mut text) = (Vec::new(), Vec::new(), Vec::new());
            for r in &m.records {
                let (a, b) = record_cues(r).unwrap();
                assert_eq!(r.label, Some((a + b) % c));
                labels.push(r.label.unwrap());
                audio.push(a);
                text.push(b);
            }
            let mi_audio = empirical_mutual_information(&audio, &labels);
            let mi_text = empirical_mutual_information(&text, &labels);
            let mi_both = empirical_mutual_information(
                &audio.iter().zip(&text).map(|(a, b)| a * c + b).collect::<Vec<_>>(),
                &labels,
            );
            if 14 % c == 0 {
                assert!(mi_audio.abs() < 1e-12, "c={c}: {mi_audio}");
                assert!(mi_text.abs() < 1e-12, "c={c}: {mi_text}");
            }
            assert!((mi_both - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn split_and_imbalanced_counts() {
        let spec = FixtureSpec {
            train_counts: vec![90, 10],
            test_counts: vec![45, 5],
            ..FixtureSpec::balanced(0, 2, 3)
        };
        let m = make_fixture(&spec).unwrap();
        assert_eq!(m.split("train").len(), 100);
        assert_eq!(m.split("test").len(), 50);
        let minority = m.split("train").iter().filter(|r| r.label == Some(1)).count();
        assert_eq!(minority, 10);
    }
}
