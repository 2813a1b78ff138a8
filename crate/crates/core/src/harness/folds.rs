use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{EmoqError, Result};

pub const NUM_FOLDS: usize = 5;
pub const EXPECTED_SPEAKERS: usize = 10;

/// Record indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_speakers: Vec<String>,
}

/// Speaker-independent five-fold partition.
///
/// Speakers are sorted by name, so IEMOCAP's `Ses01F, Ses01M, ...` line up
/// as session pairs and fold `k` holds out speakers `2k` and `2k+1`. With a
/// speaker count other than ten, speaker `s` of `n` goes to fold `5s/n`.
pub fn make_iemocap_folds(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let speaker = r
            .speaker
            .as_deref()
            .ok_or_else(|| EmoqError::Data(format!("record `{}` has no speaker; folds need one", r.id)))?;
        by_speaker.entry(speaker).or_default().push(i);
    }
    let n = by_speaker.len();
    if n < NUM_FOLDS {
        return Err(EmoqError::Data(format!(
            "{NUM_FOLDS} speaker-independent folds need at least {NUM_FOLDS} speakers, found {n}"
        )));
    }
    if n != EXPECTED_SPEAKERS {
        log::warn!("expected {EXPECTED_SPEAKERS} speakers, found {n}; folds group speakers evenly by name order");
    }
    let mut folds = vec![
        Fold {
            train: Vec::new(),
            test: Vec::new(),
            test_speakers: Vec::new(),
        };
        NUM_FOLDS
    ];
    let mut fold_of = vec![0; manifest.records.len()];
    for (s, (speaker, indices)) in by_speaker.iter().enumerate() {
        let k = s * NUM_FOLDS / n;
        folds[k].test_speakers.push(speaker.to_string());
        for &i in indices {
            fold_of[i] = k;
        }
    }
    for (i, &k) in fold_of.iter().enumerate() {
        for (j, fold) in folds.iter_mut().enumerate() {
            if j == k {
                fold.test.push(i);
            } else {
                fold.train.push(i);
            }
        }
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::AudioRef;
    use crate::harness::manifest::{DatasetKind, UtteranceRecord};
    use std::collections::BTreeSet;

    fn manifest(speakers: &[&str], per_speaker: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for s in speakers {
            for i in 0..per_speaker {
                records.push(UtteranceRecord {
                    id: format!("{s}_{i}"),
                    audio: AudioRef::File("x".into()),
                    transcript: String::new(),
                    speaker: Some(s.to_string()),
                    label: Some(0),
                    dialogue_id: None,
                    split: None,
                });
            }
        }
        DatasetManifest {
            kind: DatasetKind::Iemocap4,
            labels: DatasetKind::Iemocap4.default_labels().unwrap(),
            records,
            base_dir: None,
        }
    }

    #[test]
    fn session_pairs_are_held_out_together() {
        let speakers = ["Ses05M", "Ses01F", "Ses02M", "Ses01M", "Ses03F", "Ses02F", "Ses04F", "Ses03M", "Ses04M", "Ses05F"];
        let m = manifest(&speakers, 3);
        let folds = make_iemocap_folds(&m).unwrap();
        assert_eq!(folds[0].test_speakers, vec!["Ses01F", "Ses01M"]);
        assert_eq!(folds[4].test_speakers, vec!["Ses05F", "Ses05M"]);
        let mut seen = BTreeSet::new();
        for f in &folds {
            let train: BTreeSet<_> = f.train.iter().map(|&i| m.records[i].speaker.clone()).collect();
            let test: BTreeSet<_> = f.test.iter().map(|&i| m.records[i].speaker.clone()).collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(f.train.len() + f.test.len(), m.records.len());
            for &i in &f.test {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), m.records.len());
    }

    #[test]
    fn missing_speaker_or_too_few() {
        let mut m = manifest(&["a", "b", "c", "d", "e"], 1);
        assert_eq!(make_iemocap_folds(&m).unwrap().len(), 5);
        m.records[0].speaker = None;
        assert!(make_iemocap_folds(&m).is_err());
        assert!(make_iemocap_folds(&manifest(&["a", "b"], 2)).is_err());
    }
}
